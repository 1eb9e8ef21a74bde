from concurrent.futures import ThreadPoolExecutor
import os
import socket
import struct
import time
import unittest
import zlib

import numpy as np

from fedseg.data_processing import FrameDataset
from fedseg.errors import (
    DuplicateClientError,
    FrameError,
    HandshakeTimeoutError,
    ProtocolError,
    RoundAbortedError,
    ShapeMismatchError,
)
from fedseg.fedavg import ClientUpdate, TrainingTask, server_run
from fedseg.models import FedConfig, UNetConfig
from fedseg.params import ModelParams
from fedseg.transport import (
    Message,
    MsgType,
    SessionState,
    assign_payload,
    decode_frame,
    encode_frame,
    hello_payload,
    parse_assign,
    parse_update,
    read_frame,
    run_client,
    run_server,
    update_payload,
    write_frame,
)

UNET = UNetConfig(input_shape=(1, 8, 8), depth=1, base_channels=2, seed=2)
RUN_SLOW = os.getenv('FEDSEG_RUN_SLOW') == '1'


def _task(n_clients=1, rounds=2, **fed):
    return TrainingTask(
        fed=FedConfig(n_clients=n_clients, rounds=rounds, batch_size=2, learning_rate=1e-3,
                      handshake_timeout_s=fed.pop('handshake_timeout_s', 10.0), round_timeout_s=30.0, **fed),
        unet=UNET,
    )


def _dataset(n, seed, size=8):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 1, size, size)).astype(np.float32)
    return FrameDataset(images, (images > 0.4).astype(np.float32), (images > 0.8).astype(np.float32))


class FrameCodecTests(unittest.TestCase):
    def test_empty_done_layout(self):
        frame = encode_frame(Message(MsgType.DONE, 7))

        header = b'FSEG' + bytes([1, 5]) + struct.pack('<I', 7) + struct.pack('<Q', 0)
        self.assertEqual(frame, header + struct.pack('<I', zlib.crc32(header)))

    def test_large_update_round_trip(self):
        payload = np.random.default_rng(0).integers(0, 256, size=1 << 20, dtype=np.uint8).tobytes()
        message = Message(MsgType.UPDATE, 3, payload)

        self.assertEqual(decode_frame(encode_frame(message)), message)

    def test_flipped_payload_byte_detected(self):
        frame = bytearray(encode_frame(Message(MsgType.BROADCAST, 1, b'weights')))
        frame[20] ^= 0xFF

        with self.assertRaises(FrameError):
            decode_frame(bytes(frame))

    def test_every_mutation_is_detected(self):
        frame = encode_frame(Message(MsgType.UPDATE, 4, bytes(range(64))))
        rng = np.random.default_rng(1)
        for _ in range(10000):
            mutated = bytearray(frame)
            position = int(rng.integers(len(mutated)))
            mutated[position] ^= int(rng.integers(1, 256))
            with self.assertRaises(FrameError):
                decode_frame(bytes(mutated))

    def test_structural_errors(self):
        frame = encode_frame(Message(MsgType.HELLO, 0, hello_payload(2)))
        with self.assertRaises(FrameError):
            decode_frame(frame[:-1])
        with self.assertRaises(FrameError):
            decode_frame(frame + b'\x00')
        with self.assertRaises(FrameError):
            decode_frame(b'XSEG' + frame[4:])
        bad_type = bytearray(frame)
        bad_type[5] = 9
        with self.assertRaises(FrameError):
            decode_frame(bytes(bad_type))


class PayloadTests(unittest.TestCase):
    def test_assign_round_trip(self):
        task = _task(n_clients=3)

        self.assertEqual(parse_assign(assign_payload(1, task)), (1, task))

    def test_update_carries_count_and_loss(self):
        params = ModelParams([('w', np.arange(4, dtype=np.float32))])

        update = parse_update(update_payload(ClientUpdate(params, 12, 0.375)))

        self.assertTrue(update.params.bit_equal(params))
        self.assertEqual((update.sample_count, update.train_loss), (12, 0.375))

    def test_malformed_payloads(self):
        with self.assertRaises(ProtocolError):
            parse_assign(b'{not json')
        with self.assertRaises(ProtocolError):
            parse_update(b'\x00')

    def test_rounds_must_increase(self):
        state = SessionState(0)
        state.begin_round(1)

        with self.assertRaises(ProtocolError):
            state.begin_round(1)


class SessionTests(unittest.TestCase):
    def setUp(self):
        self.listener = socket.create_server(('127.0.0.1', 0))
        self.address = self.listener.getsockname()[:2]
        self.pool = ThreadPoolExecutor(max_workers=4)

    def tearDown(self):
        self.pool.shutdown(wait=True)
        self.listener.close()

    def _connect(self, client_id):
        sock = socket.create_connection(self.address, timeout=10)
        write_frame(sock, Message(MsgType.HELLO, 0, hello_payload(client_id)))
        return sock

    def test_wire_matches_in_process(self):
        """Two rounds keep the default suite quick; the ten-round run is in the slow variant below."""
        self._assert_wire_matches(rounds=2)

    @unittest.skipUnless(RUN_SLOW, 'set FEDSEG_RUN_SLOW=1 to run the ten-round session')
    def test_wire_matches_in_process_over_ten_rounds(self):
        self._assert_wire_matches(rounds=10)

    def _assert_wire_matches(self, rounds):
        datasets = [_dataset(3, 0), _dataset(2, 1), _dataset(4, 2)]
        task = _task(n_clients=3, rounds=rounds)

        wire_params, wire_logs = server_run(datasets, task, transport='wire')
        local_params, local_logs = server_run(datasets, task)

        self.assertTrue(wire_params.bit_equal(local_params))
        self.assertEqual([log.to_dict() for log in wire_logs], [log.to_dict() for log in local_logs])

    def test_client_returns_final_weights(self):
        server = self.pool.submit(run_server, _task(), self.listener)
        final = run_client(0, _dataset(2, 5), self.address)

        params, logs = server.result(timeout=60)
        self.assertTrue(final.bit_equal(params))
        self.assertEqual([log.round_index for log in logs], [1, 2])

    def test_handshake_timeout(self):
        with self.assertRaises(HandshakeTimeoutError):
            run_server(_task(handshake_timeout_s=0.2), self.listener)

    def test_duplicate_client_id(self):
        server = self.pool.submit(run_server, _task(n_clients=2), self.listener)
        first = self._connect(0)
        second = self._connect(0)
        try:
            with self.assertRaises(DuplicateClientError):
                server.result(timeout=30)
            self.assertIs(read_frame(first).msg_type, MsgType.ABORT)
        finally:
            first.close()
            second.close()

    def test_stale_update_is_aborted(self):
        server = self.pool.submit(run_server, _task(), self.listener)
        sock = self._connect(0)
        try:
            self.assertIs(read_frame(sock).msg_type, MsgType.ASSIGN)
            broadcast = read_frame(sock)
            self.assertEqual((broadcast.msg_type, broadcast.round), (MsgType.BROADCAST, 1))
            write_frame(sock, Message(MsgType.UPDATE, 0, b''))

            with self.assertRaises(ProtocolError):
                server.result(timeout=30)
            self.assertIs(read_frame(sock).msg_type, MsgType.ABORT)
        finally:
            sock.close()

    def test_silent_client_does_not_delay_abort(self):
        server = self.pool.submit(run_server, _task(n_clients=2), self.listener)
        silent = self._connect(0)
        faulty = self._connect(1)
        try:
            for sock in (silent, faulty):
                self.assertIs(read_frame(sock).msg_type, MsgType.ASSIGN)
                self.assertIs(read_frame(sock).msg_type, MsgType.BROADCAST)
            started = time.monotonic()
            write_frame(faulty, Message(MsgType.UPDATE, 0, b''))

            # well inside the 30 s round timeout the silent client would otherwise hold
            with self.assertRaises(ProtocolError):
                server.result(timeout=10)
            self.assertLess(time.monotonic() - started, 10)
            self.assertIs(read_frame(silent).msg_type, MsgType.ABORT)
        finally:
            silent.close()
            faulty.close()

    def test_client_with_wrong_frames_aborts_round(self):
        server = self.pool.submit(run_server, _task(), self.listener)

        with self.assertRaises(ShapeMismatchError):
            run_client(0, _dataset(2, 0, size=16), self.address)
        with self.assertRaises(RoundAbortedError):
            server.result(timeout=30)


if __name__ == '__main__':
    unittest.main()
