"""
Command-line interface for fedseg.

Subcommands:
    gen      generate a phantom dataset
    train    train and evaluate (federated or centralized)
    serve    wire-mode FedAvg server
    client   wire-mode FedAvg client
    eval     score saved weights on a dataset
    report   re-emit CSV/SVG outputs from a saved run
    compare  Cartesian vs polar vs polar with post-processing
"""
import argparse
from dataclasses import replace
import json
import logging
import os
from pathlib import Path
import socket
import sys
from typing import Optional, Sequence

from tabulate import tabulate

from fedseg.config_loader import load_config
from fedseg.data_processing import build_frame_dataset
from fedseg.errors import ConfigError, FedSegError
from fedseg.losses import STRUCTURES
from fedseg.models import AppConfig, PostProcess
from fedseg.params import load_params, save_params
from fedseg.phantom import DatasetManifest, NoiseParams, gen_dataset, load_manifest_cases, partition_clients
from fedseg.transport import run_client, run_server
from fedseg.utils import parse_host_port
from fedseg_app.services.experiment_service import (
    ExperimentSpec, Report, evaluate_weights, plan_splits, run_experiment,
)
from fedseg_app.services.log_service import setup_logging
from fedseg_app.services.report_service import emit_report, load_report

logger = logging.getLogger('fedseg_app.cli')

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_FEDSEG_ERROR = 2

COMPARE_VARIANTS = (
    ('cartesian', 'cartesian', True),
    ('polar', 'polar', False),
    ('polar+post', 'polar', True),
)


def _on_off(value: str) -> bool:
    normalized = value.strip().lower()
    if normalized in ('on', 'true', 'yes', '1'):
        return True
    if normalized in ('off', 'false', 'no', '0'):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")


def _band_mix(value: str):
    """Preset name (dataset1..3) or three comma-separated proportions."""
    if ',' not in value:
        return value
    try:
        return [float(part) for part in value.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid band proportions {value!r}") from None


def _default_seed() -> int:
    raw = os.getenv('FEDSEG_SEED', '0')
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"FEDSEG_SEED must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fedseg', description='Federated IVUS plaque segmentation simulator')
    parser.add_argument('--log-level', default=None, help='Console log level (default FEDSEG_LOG_LEVEL or INFO)')
    parser.add_argument('--log-dir', default=None, help='Directory for fedseg.log (default FEDSEG_LOG_DIR)')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Generate a phantom dataset')
    gen.add_argument('--seed', type=int, default=None, help='Dataset seed (default FEDSEG_SEED or 0)')
    gen.add_argument('--cases', type=int, default=45)
    gen.add_argument('--bands', type=_band_mix, default='dataset1',
                     help='dataset1|dataset2|dataset3 or low,moderate,high proportions')
    gen.add_argument('--out', required=True)
    gen.add_argument('--config', default=None, help='JSON config; its phantom section is used')
    gen.add_argument('--workers', type=int, default=1)
    gen.add_argument('--dropout-deg', type=float, default=None, help='Lateral signal dropout sector width')

    def experiment_args(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
        p.add_argument('--manifest', required=True, help='Dataset directory or manifest.json')
        p.add_argument('--config', default=None)
        if with_mode:
            p.add_argument('--mode', choices=['centralized', 'federated'], default='federated')
        p.add_argument('--coords', choices=['cartesian', 'polar'], default=None, help='Default from config')
        p.add_argument('--post', type=_on_off, default=None, help='on|off (default from config)')
        p.add_argument('--partition', choices=['iid', 'by_band'], default='iid')
        p.add_argument('--clients', type=int, default=None)
        p.add_argument('--rounds', type=int, default=None)

    train = sub.add_parser('train', help='Train and evaluate')
    experiment_args(train)
    train.add_argument('--protocol', choices=['holdout', 'cv'], default=None)
    train.add_argument('--transport', choices=['in_process', 'wire'], default='in_process')
    train.add_argument('--out', required=True)

    serve = sub.add_parser('serve', help='Run the FedAvg server over TCP')
    experiment_args(serve, with_mode=False)
    serve.add_argument('--listen', default='127.0.0.1:8765')
    serve.add_argument('--out', default=None, help='Directory for weights.ivwt and rounds.json')

    client = sub.add_parser('client', help='Run one FedAvg client over TCP')
    experiment_args(client, with_mode=False)
    client.add_argument('--connect', default='127.0.0.1:8765')
    client.add_argument('--id', type=int, required=True, dest='client_id')
    client.add_argument('--connect-timeout', type=float, default=30.0)
    client.add_argument('--out', default=None, help='Directory for the final weights.ivwt')

    evaluate = sub.add_parser('eval', help='Score saved weights')
    experiment_args(evaluate, with_mode=False)
    evaluate.add_argument('--weights', required=True)
    evaluate.add_argument('--cases', default=None, help='Comma-separated case ids (default: all)')
    evaluate.add_argument('--out', required=True)

    report = sub.add_parser('report', help='Re-emit outputs from a saved run')
    report.add_argument('--in', dest='in_dir', required=True)
    report.add_argument('--out', required=True)

    compare = sub.add_parser('compare', help='Compare coordinate systems and post-processing')
    experiment_args(compare)
    compare.add_argument('--protocol', choices=['holdout', 'cv'], default=None)
    compare.add_argument('--out', default=None)
    return parser


def _config(args) -> AppConfig:
    config = load_config(args.config)
    fed = config.fed
    if getattr(args, 'clients', None) is not None:
        fed = replace(fed, n_clients=args.clients)
    if getattr(args, 'rounds', None) is not None:
        fed = replace(fed, rounds=args.rounds)
    fed.validate()
    return replace(config, fed=fed)


def _spec(args, **overrides) -> ExperimentSpec:
    config = _config(args)
    values = dict(
        manifest=DatasetManifest.load(args.manifest),
        config=config,
        mode=getattr(args, 'mode', 'federated'),
        coords=args.coords or config.pipeline.coordinate_mode.value,
        post=args.post if args.post is not None else config.pipeline.postprocess is not PostProcess.NONE,
        partition_mode=args.partition,
        transport=getattr(args, 'transport', 'in_process'),
        protocol=getattr(args, 'protocol', None),
    )
    values.update(overrides)
    return ExperimentSpec(**values)


def summary_table(report: Report) -> str:
    rows = []
    for structure in STRUCTURES:
        scores = report.aggregates.get(structure)
        if scores is None:
            continue
        baseline = report.baseline.get(structure, {}).get('dsc')
        rows.append([structure, scores['dsc'], scores['recall'], scores['precision'], baseline])
    return tabulate(rows, headers=['structure', 'DSC', 'recall', 'precision', 'untrained DSC'],
                    floatfmt='.4f', missingval='-')


def cmd_gen(args) -> int:
    config = load_config(args.config).phantom
    if args.dropout_deg is not None:
        config = replace(config, dropout_deg=args.dropout_deg)
    seed = args.seed if args.seed is not None else _default_seed()
    manifest = gen_dataset(seed, args.cases, args.bands, args.out, config,
                           NoiseParams.from_config(config), workers=args.workers)
    counts = {}
    for entry in manifest.cases:
        counts[entry.band.value] = counts.get(entry.band.value, 0) + 1
    print(tabulate([[band, count] for band, count in counts.items()], headers=['band', 'cases']))
    print(f"\nManifest written to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    report = run_experiment(_spec(args))
    emit_report(report, args.out)
    print(summary_table(report))
    print(f"\nOutputs written to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    spec = _spec(args, protocol='holdout')
    task = spec.task()
    host, port = parse_host_port(args.listen)
    listener = socket.create_server((host, port))
    logger.info("Serving %d clients on %s:%d", task.fed.n_clients, host, listener.getsockname()[1])
    try:
        params, logs = run_server(task, listener)
    finally:
        listener.close()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_params(params, out / 'weights.ivwt')
        (out / 'rounds.json').write_text(
            json.dumps([log.to_dict() for log in logs], indent=2, sort_keys=True) + '\n', encoding='utf-8')
    print(tabulate([[log.round_index, log.total_samples, *log.client_losses] for log in logs],
                   headers=['round', 'frames', *[f'loss c{i}' for i in range(task.fed.n_clients)]],
                   floatfmt='.5f'))
    return EXIT_OK


def cmd_client(args) -> int:
    spec = _spec(args, protocol='holdout')
    n_clients = spec.config.fed.n_clients
    if not 0 <= args.client_id < n_clients:
        raise ConfigError(f"client id {args.client_id} outside 0..{n_clients - 1}")
    splits, _ = plan_splits(spec)
    entries = [spec.manifest.entry(c) for c in splits[0].train_ids]
    bucket = partition_clients(entries, n_clients, spec.partition_mode)[args.client_id]
    cases = load_manifest_cases(spec.manifest, [entry.case_id for entry in bucket])
    dataset = build_frame_dataset(list(cases.values()), spec.pipeline_config())
    logger.info("Client %d holds %d cases, %d frames", args.client_id, len(bucket), len(dataset))
    params = run_client(args.client_id, dataset, parse_host_port(args.connect), args.connect_timeout)
    if args.out:
        save_params(params, Path(args.out) / 'weights.ivwt')
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _spec(args)
    case_ids = [c.strip() for c in args.cases.split(',')] if args.cases else None
    report = evaluate_weights(spec, load_params(args.weights), case_ids)
    emit_report(report, args.out)
    print(summary_table(report))
    return EXIT_OK


def cmd_report(args) -> int:
    report = load_report(args.in_dir)
    emit_report(report, args.out, include_warnings=False)
    print(summary_table(report))
    return EXIT_OK


def cmd_compare(args) -> int:
    rows = []
    for label, coords, post in COMPARE_VARIANTS:
        report = run_experiment(_spec(args, coords=coords, post=post))
        if args.out:
            emit_report(report, Path(args.out) / label.replace('+', '_'))
        for structure in STRUCTURES:
            scores = report.aggregates.get(structure)
            if scores:
                rows.append([label, structure, scores['dsc'], scores['recall'], scores['precision']])
    print(tabulate(rows, headers=['method', 'structure', 'DSC', 'recall', 'precision'], floatfmt='.4f'))
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'serve': cmd_serve,
    'client': cmd_client,
    'eval': cmd_eval,
    'report': cmd_report,
    'compare': cmd_compare,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_dir, args.log_level)
    try:
        return COMMANDS[args.command](args)
    except FedSegError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FEDSEG_ERROR
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
