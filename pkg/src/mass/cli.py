"""Command-line entry point: ``mass <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluate as evaluation
from .trace import (
    AggregationConfig,
    context_split,
    ingest,
    load_trace,
    normalize,
    read_csv,
    read_series_csv,
    save_trace,
    series_to_tensor,
    split_series,
    synth_dataset,
    write_series_csv,
)

log = logging.getLogger("mass")


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def load_dataset(path, test_path=None, split_seed: int = 0, seq_len: int = 12, min_hours: int = 10):
    """Training and optional test traces, minmax-normalized per user.

    A ``.csv`` file holds hourly series and is split 50/50 by user; any other
    file is a text trace used whole for training, with ``test_path`` as the
    held-out set.
    """
    path = _existing(path)
    if path.suffix.lower() == ".csv":
        if test_path:
            raise UsageError("--test cannot be combined with a series CSV (it is split automatically)")
        train_s, test_s = split_series(read_series_csv(path), split_seed, min_hours=min_hours)
        train, test = series_to_tensor(train_s, seq_len), series_to_tensor(test_s, seq_len)
    else:
        train = load_trace(path)
        test = load_trace(_existing(test_path)) if test_path else None
    train = normalize(train, "minmax")
    return train, (normalize(test, "minmax") if test is not None else None)


# -- subcommands ---------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = AggregationConfig(args.samples_per_bucket, args.sample_interval, args.rssi_threshold)
    series = ingest(read_csv(_existing(args.input)), cfg)
    write_series_csv(series, args.out)
    print(f"{len(series)} users, {sum(len(s) for s in series)} hourly steps -> {args.out}")
    if args.contexts:
        for split in context_split(series, seq_len=args.seq_len, min_users=args.min_users, min_delta=args.min_delta):
            verdict = "significant" if split.significant else "insignificant"
            print(f"{split.label.value}\t{split.users} users\tdl {split.mean_delta_dl:+.3f}\t"
                  f"ul {split.mean_delta_ul:+.3f}\t{verdict}")
    return 0


def cmd_synth(args) -> int:
    trace = synth_dataset(args.seed, args.users, args.steps, args.corr, tuple(args.moments),
                          tuple(args.ul_moments) if args.ul_moments else None, args.autocorr)
    save_trace(trace, args.out)
    print(f"{args.users} users x {args.steps} steps -> {args.out}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    return TrainConfig(
        max_epochs=args.epochs,
        validation_period=args.validation_period,
        delta_window=args.delta_window,
        patience=args.patience,
        lr=args.lr,
        batch_users=args.batch_users,
        seq_len=args.seq_len,
        hidden_size=args.hidden,
        num_layers=args.layers,
        stats_mode=args.stats_mode,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    from .massgan import save_checkpoint
    from .trainer import conditional_gradient_descent, write_history

    train, _ = load_dataset(args.data, None, args.split_seed, args.seq_len)
    cfg = _train_config(args)
    result = conditional_gradient_descent(cfg, train)
    epochs = sum(1 for h in result.history if "event" not in h)
    save_checkpoint(result.model, args.out, extra={"epochs": epochs, "seed": args.seed})
    if args.history:
        write_history(result.history, args.history)
    if not result.candidate_saved:
        log.warning("no validation improved; saved the final model")
    print(f"trained {epochs} epochs -> {args.out}")
    return 0


def cmd_finetune(args) -> int:
    from .massgan import load_checkpoint, save_checkpoint
    from .trainer import fine_tune, write_history

    data = _existing(args.data)
    if data.suffix.lower() != ".csv":
        raise UsageError("finetune needs a labelled hourly series CSV (see `mass ingest`)")
    global_path = _existing(args.global_model)
    model = load_checkpoint(global_path)
    train_series, _ = split_series(read_series_csv(data), args.split_seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "GLOBAL.ckpt"
    if not target.exists() or not target.samefile(global_path):
        shutil.copyfile(global_path, target)
    cfg = replace(_train_config(args), seq_len=model.cfg.seq_len)
    for split in context_split(train_series, seq_len=model.cfg.seq_len, min_users=args.min_users,
                               min_delta=args.min_delta):
        if not split.significant:
            print(f"{split.label.value}: not significant, served by GLOBAL")
            continue
        split = replace(split, trace=normalize(split.trace, "minmax"))
        result = fine_tune(model, split, args.epochs, cfg)
        path = out / f"{split.label.value}.ckpt"
        save_checkpoint(result.model, path, extra={"epochs": args.epochs, "seed": args.seed, "users": split.users})
        if args.history:
            write_history(result.history, out / f"{split.label.value}.history.jsonl")
        print(f"{split.label.value}: {split.users} users -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    from .massgan import load_checkpoint

    train, test = load_dataset(args.data, args.test, args.split_seed, args.seq_len)
    model = load_checkpoint(_existing(args.model)) if args.model else None
    rows = evaluation.evaluate(model, train, test, users=args.users, seed=args.seed)
    tsv = evaluation.format_tsv(rows)
    sys.stdout.write(evaluation.format_table(rows))
    sys.stdout.write("\n" + tsv)
    if args.tsv:
        Path(args.tsv).write_text(tsv)
    return 0


def cmd_serve(args) -> int:
    from .genserver import load_registry, make_server

    registry = load_registry(_existing(args.models))
    server = make_server(registry, args.host, args.port)
    print(f"serving {', '.join(c.value for c in registry.contexts)} on http://{args.host}:{server.server_address[1]}",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


REPLAY_FLAGS = [
    ("mass_host", str), ("perf_host", str), ("seq_len", int), ("max_down", float), ("max_up", float),
    ("buffer", int), ("down_port", int), ("up_port", int), ("epoch_time", float), ("initial_context", str),
    ("interact_stay_prob", float), ("stream_stay_prob", float), ("use_signal", int), ("udp_prob", float),
    ("continuous", int), ("use_iperf", int),
]


def replay_config(args, environ=None):
    from .replay import ReplayConfig

    overrides = {}
    for name, _ in REPLAY_FLAGS:
        v = getattr(args, name, None)
        if v is None:
            continue
        if name in ("use_signal", "continuous", "use_iperf"):
            v = bool(v)
        elif name == "initial_context":
            v = v.upper()
        overrides[name] = v
    return ReplayConfig.from_env(os.environ if environ is None else environ, seed=args.seed, **overrides)


def cmd_replay(args) -> int:
    from .replay import ConstantSignal, HttpTraceSource, PerfServer, ScriptedSignal, WirelessSignal, run_replay
    from .replay.client import FetchError

    cfg = replay_config(args)
    if args.signal_script:
        signal = ScriptedSignal.from_file(_existing(args.signal_script))
    elif args.rssi is not None:
        signal = ConstantSignal(args.rssi)
    else:
        signal = WirelessSignal()
    host, port = cfg.mass_endpoint
    source = HttpTraceSource(host, port, seed=cfg.seed)
    servers = []
    if args.local_servers:
        servers = [PerfServer("127.0.0.1", cfg.down_port).start(), PerfServer("127.0.0.1", cfg.up_port).start()]
        cfg = cfg.with_(perf_host="127.0.0.1", down_port=servers[0].port, up_port=servers[1].port)
    try:
        records = run_replay(cfg, source, signal, history_path=args.history, sequences=args.sequences, seed=cfg.seed)
    except FetchError as exc:
        raise RuntimeError(str(exc)) from None
    finally:
        for s in servers:
            s.close()
    for r in records:
        print(f"{r.epoch}\t{r.direction}\t{r.transport}\t{r.app_context}_{r.signal_context}\t"
              f"requested {r.requested_mbps:.3f}\tachieved {r.achieved_mbps:.3f} Mbps"
              + (f"\t{r.error}" if r.error else ""))
    return 0


def cmd_perf_server(args) -> int:
    import time

    from .replay import PerfServer

    servers = [PerfServer(args.host, p).start() for p in args.ports]
    print("perf servers on " + ", ".join(f"{args.host}:{s.port}" for s in servers), flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        for s in servers:
            s.close()
    return 0


# -- parser --------------------------------------------------------------------


def _train_flags(p, epochs_default: int) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=epochs_default)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--validation-period", type=int, default=50)
    p.add_argument("--delta-window", type=int, default=25)
    p.add_argument("--batch-users", type=int, default=100)
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--stats-mode", choices=("raw", "representation"), default="raw")
    p.add_argument("--split-seed", type=int, default=0, help="user split for series CSV input")
    p.add_argument("--history", help="write the training log (JSON lines) here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mass", description="Context-aware trace generation and replay.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate a raw sample CSV into labelled hourly series")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--samples-per-bucket", type=int, default=6)
    p.add_argument("--sample-interval", type=float, default=600.0)
    p.add_argument("--rssi-threshold", type=float, default=-75.0)
    p.add_argument("--contexts", action="store_true", help="print context cohort verdicts")
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--min-users", type=int, default=5)
    p.add_argument("--min-delta", type=float, default=0.10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a seeded synthetic trace file")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--steps", type=int, default=12)
    p.add_argument("--corr", type=float, default=0.5)
    p.add_argument("--moments", type=float, nargs=3, default=(1.0, 0.5, 1.5), metavar=("MEAN", "STD", "SKEW"))
    p.add_argument("--ul-moments", type=float, nargs=3, metavar=("MEAN", "STD", "SKEW"))
    p.add_argument("--autocorr", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the global generator")
    p.add_argument("--data", required=True, help="series CSV or text trace file")
    p.add_argument("-o", "--out", required=True, help="checkpoint path, e.g. models/GLOBAL.ckpt")
    _train_flags(p, 2000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune per-context generators from the global one")
    p.add_argument("--data", required=True, help="labelled hourly series CSV")
    p.add_argument("--global", dest="global_model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-users", type=int, default=5)
    p.add_argument("--min-delta", type=float, default=0.10)
    _train_flags(p, 200)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="benchmark report for Uni, Dist and a trained model")
    p.add_argument("--data", required=True, help="series CSV or text trace file (training data)")
    p.add_argument("--test", help="held-out text trace file")
    p.add_argument("--model", help="checkpoint; omit to report baselines only")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--tsv", help="also write the TSV lines to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the trace generation service")
    p.add_argument("--models", required=True, help="directory of <CONTEXT>.ckpt files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="replay generated traces against perf servers")
    for name, typ in REPLAY_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), type=typ, default=None,
                       help=f"overrides ${name.upper()}")
    p.add_argument("--seed", type=int, default=None)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--signal-script", help="file with one RSSI value per epoch")
    src.add_argument("--rssi", type=float, help="constant RSSI in dBm")
    p.add_argument("--history", help="tab-separated epoch records")
    p.add_argument("--sequences", type=int, default=None, help="sequences to play when CONTINUOUS=1")
    p.add_argument("--local-servers", action="store_true", help="start loopback perf servers in-process")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("perf-server", help="run perf servers on the given ports")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--ports", type=int, nargs="+", default=[5557, 6666])
    p.set_defaults(func=cmd_perf_server)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"mass {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
