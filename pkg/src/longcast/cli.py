"""Command-line entry point: synth, train, predict, eval, bench, ablate."""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import bench as B
from . import model as M
from .data import (Normalizer, WindowSpec, make_windows, prepare_splits, read_frame, split_chronological,
                   synth_series, write_csv)
from .encoder import parse_stacks
from .errors import ConfigError, LongcastError, ResourceError
from .training import TrainConfig, evaluate, predict, train

CHECKPOINT = "checkpoint.ckpt"
HISTORY = "history.log"
METRICS = "metrics.txt"
MANIFEST = "manifest.txt"


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _numbers(kind):
    def parse(text: str):
        try:
            return tuple(kind(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}") from None
    return parse


def _stacks(text: str):
    try:
        return parse_stacks(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seed(args) -> int:
    env = os.environ.get("LONGCAST_SEED")
    if env is None or env == "":
        return args.seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"LONGCAST_SEED must be an integer, got {env!r}") from None


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV with a 'date' column")
    p.add_argument("--target", default=None, help="target column name (default: last column)")
    p.add_argument("--granularity", choices=("hourly", "quarter-hourly"), default="hourly")
    split = p.add_mutually_exclusive_group()
    split.add_argument("--split-ratios", type=_numbers(float), default=(0.7, 0.1, 0.2),
                       help="train,val,test fractions (default 0.7,0.1,0.2)")
    split.add_argument("--split-months", type=_numbers(int), default=None,
                       help="train,val,test calendar months, e.g. 12,4,4")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value model config file; flags override it")
    p.add_argument("--features", choices=("S", "M"), default=None,
                   help="S: predict the target only, M: predict every column")
    p.add_argument("--seq-len", type=_positive_int, default=None)
    p.add_argument("--label-len", type=_nonneg_int, default=None)
    p.add_argument("--pred-len", type=_positive_int, default=None)
    p.add_argument("--factor", type=_positive_float, default=None, help="sampling factor c")
    p.add_argument("--d-model", type=_positive_int, default=None)
    p.add_argument("--d-ffn", type=_positive_int, default=None)
    p.add_argument("--enc-heads", type=_positive_int, default=None)
    p.add_argument("--dec-heads", type=_positive_int, default=None)
    p.add_argument("--stacks", type=_stacks, default=None, help="LAYERS:FRACTION list, e.g. 3:1,1:1/4")
    p.add_argument("--dec-layers", type=_positive_int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--attn", choices=("probsparse", "full"), default=None)
    p.add_argument("--no-distil", action="store_true", help="drop the distilling layers")
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=_positive_int, default=8)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--patience", type=_nonneg_int, default=3)
    p.add_argument("--clip-norm", type=_positive_float, default=None)
    p.add_argument("--memory-budget-mb", type=_positive_float, default=4096.0,
                   help="refuse configurations whose estimated activations exceed this")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longcast", description="Long-horizon forecasting with sparse attention.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic CSV series")
    p.add_argument("--kind", choices=("multisine", "trend+noise"), default="multisine")
    p.add_argument("--length", type=_positive_int, default=2000)
    p.add_argument("--d-x", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train and write checkpoint, history, metrics and manifest")
    _add_data(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    for name, text in (("predict", "write de-normalized predictions as CSV"), ("eval", "score a checkpoint")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--decode", choices=("generative", "dynamic"), default="generative")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("bench", help="dot-product and activation-length accounting")
    p.add_argument("--lengths", type=_numbers(int), default=(96, 336, 720))
    p.add_argument("--modes", type=_numbers(str), default=("full", "probsparse"))
    p.add_argument("--head-dim", type=_positive_int, default=64)
    p.add_argument("--factor", type=_positive_float, default=5.0)
    p.add_argument("--stacks", type=_stacks, default=M.DEFAULT_STACKS)
    p.add_argument("--prop1-trials", type=_nonneg_int, default=0,
                   help="also run the ranking-agreement check with this many trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("ablate", help="attention x distilling x decoding grid on a small model")
    p.add_argument("--data", default=None, help="CSV (default: a synthetic multisine series)")
    p.add_argument("--target", default=None)
    p.add_argument("--granularity", choices=("hourly", "quarter-hourly"), default="hourly")
    p.add_argument("--split-ratios", type=_numbers(float), default=(0.7, 0.1, 0.2))
    p.add_argument("--split-months", type=_numbers(int), default=None)
    _add_model(p)
    _add_train(p)
    p.set_defaults(epochs=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    return parser


def _model_config(args, d_x: int, defaults: dict | None = None) -> M.InformerConfig:
    base = M.load_config(args.config).to_dict() if args.config else dict(defaults or {})
    overrides = {
        "features": args.features, "seq_len": args.seq_len, "label_len": args.label_len,
        "pred_len": args.pred_len, "factor": args.factor, "d_model": args.d_model, "d_ffn": args.d_ffn,
        "enc_heads": args.enc_heads, "dec_heads": args.dec_heads, "dec_layers": args.dec_layers,
        "dropout": args.dropout, "attn": args.attn, "dtype": args.dtype,
    }
    if args.stacks is not None:
        overrides["stacks"] = args.stacks
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_distil:
        base["distil"] = False
    # head widths follow d_model unless the config file fixes them and no flag changes the split
    if args.d_model is not None or args.enc_heads is not None:
        base["enc_head_dim"] = None
    if args.d_model is not None or args.dec_heads is not None:
        base["dec_head_dim"] = None
    base["d_x"] = d_x
    base["granularity"] = args.granularity
    return M.InformerConfig.from_dict(base)


def _load_frame(args):
    return read_frame(args.data, args.target, args.granularity)


def _prepare(args, frame, cfg):
    spec = WindowSpec(cfg.seq_len, cfg.label_len, cfg.pred_len)
    months = args.split_months
    return prepare_splits(frame, spec, cfg.features, None if months else args.split_ratios, months)


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       patience=min(args.patience, args.epochs), seed=seed, clip_norm=args.clip_norm)


def _write_manifest(out_dir: Path, command: str, seed: int, fingerprint: str, sections: dict) -> None:
    lines = [f"command={command}", f"argv={' '.join(sys.argv[1:])}", f"seed={seed}",
             f"dataset_fingerprint={fingerprint}", f"timestamp={time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    for title, values in sections.items():
        lines.extend(f"{title}.{k}={'' if v is None else v}" for k, v in values.items())
    (out_dir / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    frame = synth_series(args.kind, args.length, args.d_x, _seed(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(frame, args.out)
    print(f"wrote {len(frame)} rows x {frame.d_x} columns to {args.out}")
    return 0


def cmd_train(args) -> int:
    seed = _seed(args)
    out_dir = Path(args.out_dir)
    frame = _load_frame(args)
    cfg = _model_config(args, frame.d_x)
    tcfg = _train_config(args, seed)
    M.check_memory(cfg, tcfg.batch_size, int(args.memory_budget_mb * 2**20))
    data = _prepare(args, frame, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = M.build(cfg, seed)
    result = train(model, data.train, data.val, tcfg, history_path=out_dir / HISTORY,
                   on_epoch=lambda r: print(
                       f"epoch {r['epoch']}: train_loss={r['train_loss']:.6f} val_mse={r['val_mse']:.6f}"))
    extras = {"normalizer": data.normalizer.to_dict(), "target": frame.target,
              "split_ratios": list(args.split_ratios) if not args.split_months else None,
              "split_months": list(args.split_months) if args.split_months else None}
    M.save(model, out_dir / CHECKPOINT, extras)
    val, test = evaluate(model, data.val), evaluate(model, data.test)
    (out_dir / METRICS).write_text(
        f"best_epoch={result.best_epoch}\nval_mse={val.mse!r}\nval_mae={val.mae!r}\n"
        f"test_mse={test.mse!r}\ntest_mae={test.mae!r}\ntest_windows={test.window_count}\n", encoding="utf-8")
    _write_manifest(out_dir, "train", seed, frame.fingerprint(),
                    {"model": cfg.to_dict(), "train": asdict(tcfg)})
    print(f"test mse={test.mse:.6f} mae={test.mae:.6f} -> {out_dir / CHECKPOINT}")
    return 0


def _restore(args):
    model, extras = M.load(args.checkpoint)
    cfg = model.config
    frame = read_frame(args.data, extras.get("target"), cfg.granularity)
    if frame.d_x != cfg.d_x:
        raise ConfigError(f"data has {frame.d_x} columns, checkpoint expects {cfg.d_x}")
    months = extras.get("split_months")
    parts = split_chronological(frame, None if months else extras.get("split_ratios") or (0.7, 0.1, 0.2), months)
    normalizer = Normalizer.from_dict(extras["normalizer"])
    part = dict(zip(("train", "val", "test"), parts))[args.split]
    windows = make_windows(normalizer.transform(part), WindowSpec(cfg.seq_len, cfg.label_len, cfg.pred_len),
                           cfg.features)
    return model, frame, windows, normalizer


def cmd_predict(args) -> int:
    model, frame, windows, normalizer = _restore(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    channels = list(windows.target_channels)
    pred = normalizer.inverse(predict(model, windows, decode_mode=args.decode), channels)
    batch = windows.batch()
    truth = normalizer.inverse(batch.y, channels)
    names = [frame.columns[c] for c in channels]
    path = out_dir / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["window", "timestamp"] + [f"pred_{n}" for n in names] + [f"true_{n}" for n in names])
        for w in range(len(windows)):
            for h, ts in enumerate(batch.timestamps_future[w].astype("datetime64[s]").tolist()):
                writer.writerow([w, ts.strftime("%Y-%m-%d %H:%M:%S")]
                                + [repr(float(v)) for v in pred[w, h]] + [repr(float(v)) for v in truth[w, h]])
    _write_manifest(out_dir, "predict", model.seed, frame.fingerprint(),
                    {"model": model.config.to_dict(), "predict": {"split": args.split, "decode": args.decode}})
    print(f"wrote {len(windows) * model.config.pred_len} rows to {path}")
    return 0


def cmd_eval(args) -> int:
    model, frame, windows, _ = _restore(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(model, windows, decode_mode=args.decode)
    text = report.to_text()
    (out_dir / METRICS).write_text(text, encoding="utf-8")
    _write_manifest(out_dir, "eval", model.seed, frame.fingerprint(),
                    {"model": model.config.to_dict(), "eval": {"split": args.split, "decode": args.decode}})
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    seed = _seed(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for mode in args.modes:
        if mode not in ("full", "probsparse"):
            raise ConfigError(f"--modes entries must be full or probsparse, got {mode!r}")
    lines = []
    for L in args.lengths:
        for mode in args.modes:
            report = B.count_dot_products(mode, L, args.head_dim, args.factor, seed, args.stacks,
                                          decode_mode="generative")
            lines.append(report.to_line())
            print(lines[-1])
    if args.prop1_trials:
        agreement = B.prop1_agreement(trials=args.prop1_trials, seed=seed)
        lines.append(f"prop1 rate={agreement.rate!r} pairs={agreement.pairs}")
        print(lines[-1])
    (out_dir / "bench.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "bench", seed, "-", {"bench": {"lengths": args.lengths, "modes": args.modes,
                                                            "factor": args.factor, "head_dim": args.head_dim}})
    return 0


ABLATE_DEFAULTS = {"d_model": 32, "d_ffn": 64, "enc_heads": 4, "dec_heads": 4, "stacks": "2:1,1:1/2",
                   "dec_layers": 1, "seq_len": 48, "label_len": 24, "pred_len": 12, "features": "S",
                   "dropout": 0.05}


def cmd_ablate(args) -> int:
    seed = _seed(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = _load_frame(args) if args.data else synth_series("multisine", 1200, 1, seed)
    if not args.data:
        args.granularity = frame.granularity
    base = _model_config(args, frame.d_x, ABLATE_DEFAULTS)
    tcfg = _train_config(args, seed)
    data = _prepare(args, frame, base)
    rows = ["attn,distil,decode,status,mse,mae"]
    for attn in ("probsparse", "full"):
        for distil in (True, False):
            cfg = base.replace(attn=attn, distil=distil)
            try:
                M.check_memory(cfg, tcfg.batch_size, int(args.memory_budget_mb * 2**20))
            except ResourceError as exc:
                print(f"resource error: {exc}", file=sys.stderr)
                rows += [f"{attn},{distil},{mode},out-of-memory,-,-" for mode in ("generative", "dynamic")]
                continue
            model = M.build(cfg, seed)
            train(model, data.train, data.val, tcfg)
            for mode in ("generative", "dynamic"):
                report = evaluate(model, data.test, decode_mode=mode)
                rows.append(f"{attn},{distil},{mode},ok,{report.mse!r},{report.mae!r}")
            print("\n".join(rows[-2:]))
    (out_dir / METRICS).write_text("\n".join(rows) + "\n", encoding="utf-8")
    _write_manifest(out_dir, "ablate", seed, frame.fingerprint(), {"model": base.to_dict(), "train": asdict(tcfg)})
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except LongcastError as exc:
        print(f"longcast {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
