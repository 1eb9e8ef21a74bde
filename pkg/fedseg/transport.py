"""
Length-prefixed, checksummed TCP transport for federated rounds.

Frame layout (little-endian)::

    b'FSEG' | u8 version | u8 type | u32 round | u64 payload_len | payload | u32 CRC32

The checksum covers header and payload. A session runs
HELLO -> ASSIGN -> (BROADCAST -> UPDATE)* -> DONE, and either side may send
ABORT at any point.
"""

from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from enum import Enum, IntEnum
import json
import logging
import socket
import struct
import time
from typing import Optional, Sequence, Union
import zlib

from fedseg.errors import (
    DuplicateClientError,
    FedSegError,
    FrameError,
    HandshakeTimeoutError,
    ProtocolError,
    RoundAbortedError,
    ShapeMismatchError,
)
from fedseg.data_processing import FrameDataset
from fedseg.fedavg import (
    ClientUpdate,
    Evaluator,
    RoundLog,
    TrainingTask,
    aggregate,
    client_update,
    finish_round,
)
from fedseg.models import FedConfig, UNetConfig
from fedseg.params import ModelParams, params_from_bytes, params_to_bytes
from fedseg.unet import initial_global_params

logger = logging.getLogger(__name__)

MAGIC = b'FSEG'
PROTOCOL_VERSION = 1
HEADER = struct.Struct('<4sBBIQ')
CRC = struct.Struct('<I')
MAX_PAYLOAD = 1 << 32
_CLIENT_ID = struct.Struct('<I')
_UPDATE_PREFIX = struct.Struct('<Qd')


class MsgType(IntEnum):
    HELLO = 1
    ASSIGN = 2
    BROADCAST = 3
    UPDATE = 4
    DONE = 5
    ABORT = 6


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    round: int = 0
    payload: bytes = b''


def encode_frame(message: Message) -> bytes:
    """
    Serialize one message.

    Raises:
        FrameError: Payload larger than 4 GiB or round outside u32
    """
    payload = bytes(message.payload)
    if len(payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(payload)} bytes exceeds the 4 GiB limit")
    if not 0 <= message.round <= 0xFFFFFFFF:
        raise FrameError(f"round {message.round} does not fit in u32")
    header = HEADER.pack(MAGIC, PROTOCOL_VERSION, int(message.msg_type), message.round, len(payload))
    return header + payload + CRC.pack(zlib.crc32(payload, zlib.crc32(header)))


def _parse_header(header: bytes) -> tuple[MsgType, int, int]:
    magic, version, msg_type, round_index, payload_len = HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise FrameError(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError:
        raise FrameError(f"unknown message type {msg_type}") from None
    if payload_len > MAX_PAYLOAD:
        raise FrameError(f"declared payload of {payload_len} bytes exceeds the limit")
    return kind, round_index, payload_len


def decode_frame(data: bytes) -> Message:
    """
    Parse exactly one frame.

    Raises:
        FrameError: Truncation, trailing bytes, bad magic/version/type or CRC mismatch
    """
    data = bytes(data)
    if len(data) < HEADER.size + CRC.size:
        raise FrameError(f"frame truncated ({len(data)} bytes)")
    kind, round_index, payload_len = _parse_header(data[:HEADER.size])
    expected = HEADER.size + payload_len + CRC.size
    if len(data) != expected:
        raise FrameError(f"frame is {len(data)} bytes, header declares {expected}")
    body = data[:-CRC.size]
    (crc,) = CRC.unpack(data[-CRC.size:])
    if zlib.crc32(body) != crc:
        raise FrameError("frame checksum mismatch")
    return Message(kind, round_index, body[HEADER.size:])


def _recv_exactly(sock: socket.socket, size: int) -> bytes:
    buffer = bytearray(size)
    view = memoryview(buffer)
    received = 0
    while received < size:
        count = sock.recv_into(view[received:], size - received)
        if count == 0:
            raise FrameError(f"connection closed after {received} of {size} bytes")
        received += count
    return bytes(buffer)


def read_frame(sock: socket.socket) -> Message:
    header = _recv_exactly(sock, HEADER.size)
    _, _, payload_len = _parse_header(header)
    rest = _recv_exactly(sock, payload_len + CRC.size)
    return decode_frame(header + rest)


def write_frame(sock: socket.socket, message: Message) -> None:
    sock.sendall(encode_frame(message))


def hello_payload(client_id: int) -> bytes:
    return _CLIENT_ID.pack(client_id)


def parse_hello(payload: bytes) -> int:
    if len(payload) != _CLIENT_ID.size:
        raise ProtocolError(f"HELLO payload must be {_CLIENT_ID.size} bytes, got {len(payload)}")
    return _CLIENT_ID.unpack(payload)[0]


def assign_payload(client_id: int, task: TrainingTask) -> bytes:
    body = {'client_id': client_id, 'fed': asdict(task.fed), 'unet': asdict(task.unet)}
    return json.dumps(body, sort_keys=True).encode('utf-8')


def parse_assign(payload: bytes) -> tuple[int, TrainingTask]:
    try:
        body = json.loads(payload.decode('utf-8'))
        unet = dict(body['unet'])
        unet['input_shape'] = tuple(unet['input_shape'])
        return int(body['client_id']), TrainingTask(FedConfig(**body['fed']), UNetConfig(**unet))
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed ASSIGN payload: {exc}") from exc


def update_payload(update: ClientUpdate) -> bytes:
    return _UPDATE_PREFIX.pack(update.sample_count, update.train_loss) + params_to_bytes(update.params)


def parse_update(payload: bytes) -> ClientUpdate:
    if len(payload) < _UPDATE_PREFIX.size:
        raise ProtocolError("UPDATE payload truncated")
    count, loss = _UPDATE_PREFIX.unpack_from(payload, 0)
    return ClientUpdate(params_from_bytes(payload[_UPDATE_PREFIX.size:]), int(count), float(loss))


class SessionPhase(str, Enum):
    JOINING = 'joining'
    WAITING = 'waiting'
    TRAINING = 'training'
    CLOSED = 'closed'


@dataclass
class SessionState:
    """Per-connection bookkeeping; rounds must strictly increase."""

    client_id: int
    phase: SessionPhase = SessionPhase.JOINING
    last_round: int = 0

    def begin_round(self, round_index: int) -> None:
        if round_index <= self.last_round:
            raise ProtocolError(
                f"client {self.client_id}: round {round_index} after round {self.last_round}"
            )
        self.last_round = round_index
        self.phase = SessionPhase.TRAINING


def _send_abort(sock: socket.socket, round_index: int, reason: str) -> None:
    try:
        write_frame(sock, Message(MsgType.ABORT, round_index, reason.encode('utf-8')[:4096]))
    except OSError:
        pass


def _accept_clients(listener: socket.socket, task: TrainingTask,
                    sessions: dict[int, tuple[SessionState, socket.socket]]) -> None:
    n_clients = task.fed.n_clients
    deadline = time.monotonic() + task.fed.handshake_timeout_s
    while len(sessions) < n_clients:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise HandshakeTimeoutError(
                f"only {len(sessions)} of {n_clients} clients joined within "
                f"{task.fed.handshake_timeout_s:g}s"
            )
        listener.settimeout(remaining)
        try:
            conn, address = listener.accept()
        except socket.timeout:
            continue
        conn.settimeout(task.fed.round_timeout_s)
        try:
            hello = read_frame(conn)
            if hello.msg_type is not MsgType.HELLO:
                raise ProtocolError(f"expected HELLO, got {hello.msg_type.name}")
            client_id = parse_hello(hello.payload)
            if client_id in sessions:
                raise DuplicateClientError(f"client id {client_id} joined twice")
            if client_id >= n_clients:
                raise ProtocolError(f"client id {client_id} outside 0..{n_clients - 1}")
        except FedSegError as exc:
            _send_abort(conn, 0, str(exc))
            conn.close()
            raise
        logger.info("Client %d joined from %s:%s", client_id, *address[:2])
        sessions[client_id] = (SessionState(client_id, SessionPhase.WAITING), conn)


def _collect_updates(pool: ThreadPoolExecutor, round_index: int,
                     sessions: dict[int, tuple[SessionState, socket.socket]]) -> list[ClientUpdate]:
    """Read one UPDATE per client as they arrive; returned in client id order."""
    futures = {pool.submit(read_frame, conn): cid for cid, (_, conn) in sorted(sessions.items())}
    updates: dict[int, ClientUpdate] = {}
    for future in as_completed(futures):
        cid = futures[future]
        try:
            message = future.result()
        except OSError as exc:
            raise RoundAbortedError(f"round {round_index}: client {cid} connection failed: {exc}") from exc
        if message.msg_type is MsgType.ABORT:
            raise RoundAbortedError(
                f"round {round_index}: client {cid} aborted: {message.payload.decode('utf-8', 'replace')}"
            )
        if message.msg_type is not MsgType.UPDATE:
            raise ProtocolError(f"client {cid}: expected UPDATE, got {message.msg_type.name}")
        if message.round != round_index:
            raise ProtocolError(f"client {cid}: UPDATE for round {message.round} during round {round_index}")
        updates[cid] = parse_update(message.payload)
        sessions[cid][0].phase = SessionPhase.WAITING
    return [updates[cid] for cid in sorted(updates)]


def _abort_sessions(sessions: dict[int, tuple[SessionState, socket.socket]], round_index: int,
                    reason: str) -> None:
    # shutdown wakes receiver threads still blocked on a silent peer
    for _, (state, conn) in sorted(sessions.items()):
        _send_abort(conn, round_index, reason)
        state.phase = SessionPhase.CLOSED
        try:
            conn.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


def run_server(task: TrainingTask, listener: socket.socket, evaluate: Optional[Evaluator] = None,
               initial_params: Optional[ModelParams] = None) -> tuple[ModelParams, list[RoundLog]]:
    """
    Serve one federated training session on an already-bound listener.

    Any timeout, malformed frame or protocol violation sends ABORT to every
    connected client as soon as it is detected, without waiting for the
    other clients of the round; no partial aggregation happens.

    Raises:
        HandshakeTimeoutError: Not all clients joined in time
        DuplicateClientError: A client id was announced twice
        ProtocolError: Stale round or unexpected message
        RoundAbortedError: A client aborted or its connection failed
    """
    task.validate()
    sessions: dict[int, tuple[SessionState, socket.socket]] = {}
    pool: Optional[ThreadPoolExecutor] = None
    current_round = 0
    try:
        _accept_clients(listener, task, sessions)
        for cid, (state, conn) in sorted(sessions.items()):
            write_frame(conn, Message(MsgType.ASSIGN, 0, assign_payload(cid, task)))
        global_params = initial_params if initial_params is not None else initial_global_params(task.unet)
        logs: list[RoundLog] = []
        pool = ThreadPoolExecutor(max_workers=len(sessions), thread_name_prefix='fedseg-recv')
        for current_round in range(1, task.fed.rounds + 1):
            blob = params_to_bytes(global_params)
            for cid, (state, conn) in sorted(sessions.items()):
                state.begin_round(current_round)
                write_frame(conn, Message(MsgType.BROADCAST, current_round, blob))
            updates = _collect_updates(pool, current_round, sessions)
            global_params = aggregate([u.params for u in updates], [u.sample_count for u in updates])
            logs.append(finish_round(current_round, updates, global_params, task, evaluate))
        final_blob = params_to_bytes(global_params)
        for _, (state, conn) in sorted(sessions.items()):
            write_frame(conn, Message(MsgType.DONE, task.fed.rounds, final_blob))
            state.phase = SessionPhase.CLOSED
        return global_params, logs
    except (FedSegError, OSError) as exc:
        logger.error("Aborting federated session in round %d: %s", current_round, exc)
        _abort_sessions(sessions, current_round, str(exc))
        if isinstance(exc, FedSegError):
            raise
        raise RoundAbortedError(f"round {current_round} aborted: {exc}") from exc
    finally:
        for _, (_, conn) in sessions.items():
            conn.close()
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)


def run_client(client_id: int, dataset: FrameDataset, address: Union[tuple[str, int], socket.socket],
               connect_timeout: float = 30.0) -> ModelParams:
    """
    Join a server, train every broadcast round and return the final weights.

    Raises:
        RoundAbortedError: The server aborted the session
        ProtocolError: Unexpected message or non-increasing round
        ShapeMismatchError: Local frames do not fit the assigned network
    """
    sock = address if isinstance(address, socket.socket) else socket.create_connection(
        address, timeout=connect_timeout)
    state = SessionState(client_id)
    last_round = 0
    try:
        write_frame(sock, Message(MsgType.HELLO, 0, hello_payload(client_id)))
        assign = read_frame(sock)
        if assign.msg_type is MsgType.ABORT:
            raise RoundAbortedError(f"server aborted: {assign.payload.decode('utf-8', 'replace')}")
        if assign.msg_type is not MsgType.ASSIGN:
            raise ProtocolError(f"expected ASSIGN, got {assign.msg_type.name}")
        assigned_id, task = parse_assign(assign.payload)
        if assigned_id != client_id:
            raise ProtocolError(f"server assigned id {assigned_id} to client {client_id}")
        if dataset.input_shape != tuple(task.unet.input_shape):
            raise ShapeMismatchError(
                f"local frames {dataset.input_shape} do not fit network input {tuple(task.unet.input_shape)}"
            )
        sock.settimeout(task.fed.round_timeout_s)
        state.phase = SessionPhase.WAITING
        while True:
            message = read_frame(sock)
            last_round = message.round
            if message.msg_type is MsgType.BROADCAST:
                state.begin_round(message.round)
                update = client_update(client_id, params_from_bytes(message.payload), dataset, task,
                                       message.round)
                write_frame(sock, Message(MsgType.UPDATE, message.round, update_payload(update)))
                state.phase = SessionPhase.WAITING
            elif message.msg_type is MsgType.DONE:
                state.phase = SessionPhase.CLOSED
                logger.info("Client %d finished after round %d", client_id, state.last_round)
                return params_from_bytes(message.payload)
            elif message.msg_type is MsgType.ABORT:
                raise RoundAbortedError(f"server aborted: {message.payload.decode('utf-8', 'replace')}")
            else:
                raise ProtocolError(f"unexpected {message.msg_type.name} from server")
    except RoundAbortedError:
        raise
    except FedSegError as exc:
        _send_abort(sock, last_round, str(exc))
        raise
    finally:
        sock.close()


def run_loopback(partitioned_datasets: Sequence[FrameDataset], task: TrainingTask,
                 evaluate: Optional[Evaluator] = None,
                 host: str = '127.0.0.1') -> tuple[ModelParams, list[RoundLog]]:
    """Server and every client in one process, talking over loopback TCP."""
    listener = socket.create_server((host, 0))
    port = listener.getsockname()[1]
    logger.info("Loopback federation on %s:%d with %d clients", host, port, len(partitioned_datasets))
    try:
        with ThreadPoolExecutor(max_workers=len(partitioned_datasets) + 1,
                                thread_name_prefix='fedseg-wire') as pool:
            server = pool.submit(run_server, task, listener, evaluate)
            clients = [
                pool.submit(run_client, client_id, dataset, (host, port))
                for client_id, dataset in enumerate(partitioned_datasets)
            ]
            result = server.result()
            for future in clients:
                future.result()
            return result
    finally:
        listener.close()
