"""
Command-line entry point: ``python -m radar <command> [flags]``.

Exit codes: 0 success, 2 usage / shape mismatch, 3 I/O failure,
4 missing or corrupt artifact, 5 numerical abort.
"""
import argparse
import json
import logging
import os
import sys
import warnings
from typing import Optional, Sequence

import numpy as np

from models.rimformer.rimformer import ModelConfig, count_parameters, rimformer_forward
from models.rimformer.training import (
    LossConfig, ScheduleConfig, NonFiniteLossError, run_train, load_rimformer,
)
from radar.dataset import generate_dataset, load_dataset
from radar.evaluation import (
    CfarConfig, as_complex, evaluate_testset, predict, range_profile, rd_map, stft, gather_reports,
    range_axis, frequency_axis, velocity_axis, time_axis,
)
from radar.simulation import ChirpParams, SimConfig, toy_configs
from utils.data import check_output_dir, write_json_data, write_csv_data
from utils.python import now, set_seeds
from utils.serialization import CorruptArtifactError, read_rimt, write_rimt
from utils.windowing import WindowConfig

logging.basicConfig()
logger = logging.getLogger(__name__)
logger.setLevel(logging.DEBUG)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4, 5


def _save_config(args: argparse.Namespace, output_path: str) -> None:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(output_path, "config.json"), "w") as file:
        json.dump(config, file, ensure_ascii=False)


# ------------------
#   Commands
# ------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    set_seeds(args.seed)
    if args.samples == SimConfig().n_samples:
        chirp, sim = ChirpParams(), SimConfig(iq=not args.real)
    else:
        chirp, sim = toy_configs(args.samples, iq=not args.real)
    manifest = generate_dataset(
        n_pairs=args.n, out_path=args.out, split=args.split, master_seed=args.seed,
        chirp=chirp, sim=sim, workers=args.workers,
    )
    _save_config(args, args.out)
    counts = manifest["counts"]
    print(f"{manifest['n_pairs']} pairs -> {args.out} | train: {counts['train']} | val: {counts['val']} | test: {counts['test']}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    set_seeds(args.seed)
    dataset = load_dataset(args.data)
    model_cfg = ModelConfig.from_profile(
        args.profile, signal_len=dataset.sim.n_samples, window=WindowConfig(args.slide, args.overlap),
        in_channels=dataset.sim.channels, n_layers=args.layers, attention=args.attention,
        use_conv_block=not args.no_conv_block,
    )
    loss_cfg = LossConfig(lam=args.lam, spectrum_mode=args.spectrum_mode, kind=args.loss)
    sched_cfg = ScheduleConfig(lr_max=args.lr, lr_min=args.lr_min)
    check_output_dir(args.out)
    _save_config(args, args.out)
    logger.info(f"training {args.profile} model with {count_parameters(model_cfg)} parameters on {args.data}")

    report = run_train(
        dataset, model_cfg, args.out, loss_cfg, sched_cfg, epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed, checkpoint_every=args.checkpoint_every, val_limit=args.val_limit,
    )
    final = report.final
    print(f"epoch {final.epoch} | val loss: {final.val_loss:.6f} | val sinr: {final.val_sinr_db:.2f} dB | checkpoints: {len(report.checkpoints)}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    params, model_cfg = None, None
    if args.ckpt and args.ckpt.lower() != "none":
        params, model_cfg, _ = load_rimformer(args.ckpt)
    cfar_cfg = CfarConfig(threshold_factor=args.alpha) if args.cfar else None
    records = dataset.split(args.split)

    if params is None:
        reconstructions = [getattr(r, args.passthrough) for r in records]
    else:
        reconstructions = predict(records, params, model_cfg)
    report = evaluate_testset(
        records, params, model_cfg, dataset.chirp, dataset.sim, cfar_cfg=cfar_cfg,
        passthrough=args.passthrough, timing=args.time, split=args.split, predictions=reconstructions,
    )
    check_output_dir(args.out)
    _save_config(args, args.out)
    write_json_data(report.to_dict(), os.path.join(args.out, "eval_report.json"), force=True)
    write_csv_data(
        ([r["index"], r["mse"], r["sinr_db"], r["input_sinr_db"]] for r in report.per_sample),
        os.path.join(args.out, "per_sample.csv"), header=("index", "mse", "sinr_db", "input_sinr_db"),
    )

    spectra_dir = os.path.join(args.out, "spectra")
    os.makedirs(spectra_dir)
    axis = range_axis(dataset.sim.n_samples, dataset.chirp, dataset.sim)
    for record, recon in zip(records, reconstructions):
        profile = range_profile(recon * record.scale)
        write_csv_data(
            zip(range(len(profile)), axis, profile),
            os.path.join(spectra_dir, f"{record.index:05d}.csv"), header=("bin", "range_m", "value_db"),
        )
    print(f"{args.split} | avg sinr: {report.mean_sinr_db:.2f} dB | median sinr: {report.median_sinr_db:.2f} dB | mse: {report.mean_mse:.3e}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    params, model_cfg, _ = load_rimformer(args.ckpt)
    signal = read_rimt(args.inp)
    if np.iscomplexobj(signal):
        raise ValueError("infer expects a real [signal_len, channels] tensor")
    expected = (model_cfg.signal_len, model_cfg.in_channels)
    if signal.shape != expected:
        raise ValueError(f"input shape {signal.shape} does not match model input {expected}")
    peak = float(np.abs(signal).max())
    if peak == 0.0:
        raise ValueError("input signal is all zeros")
    output = rimformer_forward(signal / peak, params, model_cfg).data * peak
    write_rimt(args.out, output.astype(signal.dtype))
    logger.info(f"wrote {output.shape} reconstruction to {args.out}")
    return EXIT_OK


def _export_configs(args: argparse.Namespace, n_samples: int):
    chirp = ChirpParams.for_duration(args.chirp_duration, f0=args.f0, slope=args.slope)
    return chirp, SimConfig(fs=args.fs, n_samples=n_samples)


def cmd_export(args: argparse.Namespace) -> int:
    if args.what not in ("stft", "rd", "profile"):
        raise ValueError(f"--what must be stft, rd or profile, got {args.what}")
    signal = as_complex(read_rimt(args.inp))

    if args.what == "profile":
        if signal.ndim != 1:
            raise ValueError(f"profile export needs one chirp, got {signal.shape}")
        chirp, sim = _export_configs(args, len(signal))
        profile = range_profile(signal, args.window)
        write_csv_data(
            zip(range_axis(len(signal), chirp, sim), frequency_axis(len(signal), sim.fs), profile),
            args.out, header=("range_m", "frequency_hz", "value_db"),
        )
    elif args.what == "rd":
        if signal.ndim != 2:
            raise ValueError(f"rd export needs a [n_chirps, n_samples] frame, got {signal.shape}")
        chirp, sim = _export_configs(args, signal.shape[1])
        matrix = rd_map(signal, (args.window, args.window))
        ranges = range_axis(signal.shape[1], chirp, sim)
        write_csv_data(
            ([v] + list(row) for v, row in zip(velocity_axis(signal.shape[0], chirp), matrix)),
            args.out, header=["velocity_mps \\ range_m"] + list(ranges),
        )
    else:
        if signal.ndim != 1:
            raise ValueError(f"stft export needs one chirp, got {signal.shape}")
        chirp, sim = _export_configs(args, len(signal))
        matrix = stft(signal, args.win_len, args.hop, args.window)
        times = time_axis(matrix.shape[1], args.hop, sim.fs)
        write_csv_data(
            ([f] + list(row) for f, row in zip(frequency_axis(args.win_len, sim.fs), matrix)),
            args.out, header=["frequency_hz \\ time_s"] + list(times),
        )
    logger.info(f"exported {args.what} of {args.inp} to {args.out}")
    return EXIT_OK


def cmd_gather(args: argparse.Namespace) -> int:
    if not os.path.isdir(args.root):
        raise FileNotFoundError(args.root)
    rows = gather_reports(args.root)
    columns = sorted({key for row in rows for key in row}, key=lambda k: (k != "run", k))
    write_csv_data(([row.get(c) for c in columns] for row in rows), args.out, header=columns)
    print(f"{len(rows)} runs -> {args.out}")
    return EXIT_OK


# ------------------
#   Parser
# ------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radar", description="FMCW interference mitigation toolkit")
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    gen = sub.add_parser("gen-data", help="Simulate a paired dataset")
    gen.add_argument("--n", type=int, required=True, help="Number of (interfered, clean) pairs")
    gen.add_argument("--out", type=str, default=f"data/{now()}", help="Output directory")
    gen.add_argument("--seed", type=int, default=0, help="Master seed")
    gen.add_argument("--split", type=str, default="8:1:1", help="train:val:test ratios")
    gen.add_argument("--samples", type=int, default=1024, help="Samples per chirp (T = samples / fs)")
    gen.add_argument("--real", default=False, action="store_true", help="Real-valued IF instead of I/Q")
    gen.add_argument("--workers", type=int, default=1, help="Simulation threads")
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="Train a model")
    tr.add_argument("--data", type=str, required=True, help="Dataset directory")
    tr.add_argument("--profile", type=str, default="tiny", choices=("tiny", "full", "paper"), help="paper is an alias of full")
    tr.add_argument("--epochs", type=int, default=500)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", type=str, default=f"runs/{now()}")
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--lr", type=float, default=1e-4, help="Peak learning rate of the schedule")
    tr.add_argument("--lr-min", type=float, default=1e-6, help="Floor learning rate of the schedule")
    tr.add_argument("--lambda", dest="lam", type=float, default=0.3, help="Weight of the spectrum term")
    tr.add_argument("--spectrum-mode", type=str, default="magnitude", choices=("magnitude", "complex"))
    tr.add_argument("--loss", type=str, default="hybrid", choices=("hybrid", "mse"))
    tr.add_argument("--attention", type=str, default="dual", choices=("dual", "flat"))
    tr.add_argument("--no-conv-block", default=False, action="store_true")
    tr.add_argument("--layers", type=int, default=None, help="Override the profile's layer count")
    tr.add_argument("--slide", type=int, default=16, help="Window slide L")
    tr.add_argument("--overlap", type=int, default=16, help="Window overlap M")
    tr.add_argument("--checkpoint-every", type=int, default=50)
    tr.add_argument("--val-limit", type=int, default=None, help="Validate on the first n val pairs only")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint (or the raw signals)")
    ev.add_argument("--data", type=str, required=True)
    ev.add_argument("--ckpt", type=str, default="none", help="Checkpoint file, or 'none' for passthrough")
    ev.add_argument("--passthrough", type=str, default="interfered", choices=("interfered", "clean"))
    ev.add_argument("--cfar", default=False, action="store_true", help="Also run CA-CFAR detection")
    ev.add_argument("--alpha", type=float, default=0.82, help="CFAR threshold factor")
    ev.add_argument("--split", type=str, default="test", choices=("train", "val", "test"))
    ev.add_argument("--time", default=False, action="store_true", help="Measure inference time")
    ev.add_argument("--out", type=str, default=f"runs/eval_{now()}")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="Reconstruct one signal")
    inf.add_argument("--ckpt", type=str, required=True)
    inf.add_argument("--in", dest="inp", type=str, required=True, help="Input RIMT [signal_len, channels]")
    inf.add_argument("--out", type=str, required=True)
    inf.set_defaults(func=cmd_infer)

    ex = sub.add_parser("export", help="Write plot data as CSV")
    ex.add_argument("--what", type=str, required=True, help="stft | rd | profile")
    ex.add_argument("--in", dest="inp", type=str, required=True)
    ex.add_argument("--out", type=str, required=True)
    ex.add_argument("--f0", type=float, default=76.5e9)
    ex.add_argument("--slope", type=float, default=3e13)
    ex.add_argument("--fs", type=float, default=51.2e6)
    ex.add_argument("--chirp-duration", type=float, default=20e-6)
    ex.add_argument("--window", type=str, default="rectangular", choices=("rectangular", "hann"))
    ex.add_argument("--win-len", type=int, default=128)
    ex.add_argument("--hop", type=int, default=32)
    ex.set_defaults(func=cmd_export)

    ga = sub.add_parser("gather", help="Tabulate every eval report under a directory")
    ga.add_argument("--root", type=str, default="runs")
    ga.add_argument("--out", type=str, default="results.csv")
    ga.set_defaults(func=cmd_gather)

    for p in (gen, tr, ev, inf, ex, ga):
        p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` act as defaults that explicit flags override."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config", type=str, default=None)
    known, _ = pre.parse_known_args(argv)
    commands = parser._subparsers._group_actions[0].choices
    if known.config and known.command in commands:
        with open(known.config, "r", encoding="utf-8") as file:
            overrides = json.load(file)
        subparser = commands[known.command]
        unknown = sorted(set(overrides) - {action.dest for action in subparser._actions})
        if unknown:
            parser.error(f"unknown keys in {known.config}: {unknown}")
        subparser.set_defaults(**overrides)
        for action in subparser._actions:
            if action.dest in overrides:
                action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    warnings.simplefilter('ignore')
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(f"config file not found: {e}")
        return EXIT_ARTIFACT
    except json.JSONDecodeError as e:
        logger.error(f"unreadable config file: {e}")
        return EXIT_USAGE

    try:
        return args.func(args)
    except NonFiniteLossError as e:
        logger.error(f"numerical abort: {e}")
        return EXIT_NUMERIC
    except (CorruptArtifactError, FileNotFoundError) as e:
        logger.error(f"missing or corrupt artifact: {e}")
        return EXIT_ARTIFACT
    except ValueError as e:
        logger.error(f"invalid arguments: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO


if __name__ == '__main__':
    sys.exit(main())
