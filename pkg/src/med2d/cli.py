"""``med2d`` command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure
(divergence, unreadable data, I/O).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .arch import DEFAULT_RATIO, VARIANTS, build_model, complexity_ledger, count_parameters, filter_schedule
from .config import ConfigError, load_run_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# total reported for the reference architecture at 256 x 256
REFERENCE_PARAMS = 2_070_000

_thread_limiter = None


def apply_threads(n: Optional[int]) -> None:
    """Cap BLAS and numba parallelism at ``n`` threads."""
    global _thread_limiter
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    import numba

    _thread_limiter = threadpool_limits(limits=n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _default_threads() -> Optional[int]:
    raw = os.environ.get("MED2D_THREADS")
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MED2D_THREADS must be an integer, got {raw!r}") from None


def _write_rows(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _run_config(args, base=None):
    return load_run_config(args.config, args.set or (), base=base)


# --- commands -----------------------------------------------------------------


def cmd_schedule(args) -> int:
    if not args.r > 0 or args.f1 < 1 or args.f2 < 1 or args.depth < 2:
        raise ConfigError("need r > 0, f1 >= 1, f2 >= 1 and depth >= 2")
    for n, v in enumerate(filter_schedule(args.r, args.f1, args.f2, args.depth).values, start=1):
        print(n, v)
    return EXIT_OK


def cmd_summary(args) -> int:
    base = {"model.variant": args.ablate} if args.ablate else None
    rc = _run_config(args, base)
    table = count_parameters(rc.model)
    print(f"{'stage':<12}{'layer':<28}{'params':>10}")
    for stage, layer, n in table.rows:
        print(f"{stage:<12}{layer:<28}{n:>10}")
    dev = 100.0 * (table.total - REFERENCE_PARAMS) / REFERENCE_PARAMS
    print(f"total parameters: {table.total}")
    print(f"deviation from 2.07M: {dev:+.1f}%")
    ledger = complexity_ledger(rc.model)
    print("variant totals:")
    for variant in VARIANTS:
        total = [r[4] for r in ledger if r[0] == variant][-1]
        print(f"  {variant:<20}{total:>10}")
    if args.out:
        out = Path(args.out)
        rc.write_resolved(out)
        _write_rows(out / "reports" / "complexity.csv",
                    ("variant", "stage", "layer", "param_count", "cumulative_total"), ledger)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .data.synth import DEFAULT_SHIFT, NO_SHIFT, synth_corpus

    if args.n < 1 or args.size < 16 or args.size % 16:
        raise ConfigError("need --n >= 1 and --size a positive multiple of 16")
    shift = DEFAULT_SHIFT if args.shift == "default" else NO_SHIFT
    root = synth_corpus(args.kind, args.n, args.size, args.seed, args.out, shift)
    (root / "config.resolved").write_text(
        f"kind: {args.kind}\nn: {args.n}\nseed: {args.seed}\nshift: {args.shift}\nsize: {args.size}\n"
    )
    print(f"wrote {args.n} {args.kind} samples to {root}")
    return EXIT_OK


def _load_data(root, model_cfg):
    from .data import load_dataset

    if root is None:
        raise ConfigError("no dataset given (use --data or data.corpus)")
    data = load_dataset(root, model_cfg.num_classes, size=model_cfg.input_size)
    if len(data) == 0:
        raise ConfigError(f"no samples found under {root}")
    return data


def _train_run(rc, data, out: Path, resume: bool = False):
    from .train import JsonlSink, load_checkpoint, train

    ckpt_dir = out / "checkpoints"
    last = best = None
    if resume:
        last_path = ckpt_dir / "last.m2sn"
        if not last_path.exists():
            raise FileNotFoundError(f"nothing to resume: {last_path} does not exist")
        last = load_checkpoint(last_path)
        if (ckpt_dir / "best.m2sn").exists():
            best = load_checkpoint(ckpt_dir / "best.m2sn")
    rc.write_resolved(out)
    model = build_model(rc.model, seed=rc.model_seed)
    sink = JsonlSink(out / "metrics.jsonl", truncate_after_epoch=last.epoch if last else None)
    return train(model, data, rc.train, sink, resume=last, resume_best=best, checkpoint_dir=ckpt_dir)


def cmd_train(args) -> int:
    out = Path(args.out)
    base = None
    if args.resume and args.config is None and (out / "config.resolved").exists():
        import yaml

        base = yaml.safe_load((out / "config.resolved").read_text())
    rc = _run_config(args, base)
    if args.no_wall_clock:
        rc = load_run_config(None, [], base={**rc.resolved, "train.record_wall_time": False})
    data = _load_data(args.data or rc.data.get("corpus"), rc.model)
    result = _train_run(rc, data, out, resume=args.resume)
    train_recs = [r for r in result.history if r["split"] == "train" and r["dsc"] is not None]
    final = train_recs[-1] if train_recs else None
    print(f"stopped: {result.stop_reason} after epoch {result.last.epoch}")
    if final is not None:
        print(f"train dsc {final['dsc']:.4f} (epoch {final['epoch']})")
    print(f"best val dsc {result.best.best_val:.4f} (epoch {result.best.best_epoch})")
    return EXIT_OK


def _split_of(data, ckpt, which):
    from .data import SplitDescriptor, split

    if which == "all":
        return data
    parts = dict(zip(("train", "val", "test"), split(data, SplitDescriptor(seed=ckpt.train_cfg.get("split_seed", 0)))))
    return parts[which]


def cmd_eval(args) -> int:
    from .evaluate import evaluate_dataset, table1_csv
    from .train import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    data = _split_of(_load_data(args.data, model.cfg), ckpt, args.split)
    report = evaluate_dataset(model, data, checkpoint_id=ckpt.identity)
    row = (args.modality, Path(args.data).resolve().name, model.cfg.input_size, report.dsc)
    text = table1_csv([row])
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(
            f"checkpoint: {args.checkpoint}\ndata: {args.data}\nsplit: {args.split}\nmodality: {args.modality}\n"
        )
        (out / "reports" / "eval.csv").write_text(text)
        (out / "reports" / "eval.jsonl").write_text(report.to_json() + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import IMAGE_EXTENSIONS, read_image, resize_bilinear, resize_nearest, to_float_image, write_pnm
    from .evaluate import hard_labels
    from .train import load_checkpoint

    model = load_checkpoint(args.checkpoint).model()
    src = Path(args.input)
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS) if src.is_dir() else [src]
    out = Path(args.out) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = to_float_image(read_image(p))
        probs = model.predict(resize_bilinear(img, model.cfg.input_size)[None])[0]
        labels = resize_nearest(hard_labels(probs), img.shape[:2])
        scale = 255 if model.cfg.num_classes == 1 else 1
        write_pnm(out / f"{p.stem}.pgm", (labels * scale).astype(np.uint8))
    (Path(args.out) / "config.resolved").write_text(f"checkpoint: {args.checkpoint}\ninput: {args.input}\n")
    print(f"wrote {len(paths)} prediction(s) to {out}")
    return EXIT_OK


def cmd_xeval(args) -> int:
    from .evaluate import cross_dataset_eval, table3_csv

    tests = [t for t in args.test_corpora.split(",") if t]
    if not tests:
        raise ConfigError("--test-corpora needs at least one corpus")
    rows, _ = cross_dataset_eval(args.checkpoint, args.train_corpus, tests)
    text = table3_csv(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        (out / "reports").mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(
            f"checkpoint: {args.checkpoint}\ntrain_corpus: {args.train_corpus}\ntest_corpora: {args.test_corpora}\n"
        )
        (out / "reports" / "xeval.csv").write_text(text)
    return EXIT_OK


ABLATION_HEADER = ("variant", "params", "params_m", "best_val_dsc", "test_dsc", "epochs", "status")


def cmd_ablate(args) -> int:
    from .evaluate import evaluate_dataset
    from .train import DivergenceError

    variants = list(VARIANTS) if args.variants == "all" else args.variants.split(",")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variant(s) {bad}; expected {sorted(VARIANTS)}")
    out = Path(args.out)
    base_rc = _run_config(args)
    if args.no_wall_clock:
        base_rc = load_run_config(None, [], base={**base_rc.resolved, "train.record_wall_time": False})
    base_rc.write_resolved(out)
    data = _load_data(args.data or base_rc.data.get("corpus"), base_rc.model)
    rows, failed = [], False
    for variant in variants:
        rc = load_run_config(None, [], base={**base_rc.resolved, "model.variant": variant})
        params = count_parameters(rc.model).total
        try:
            result = _train_run(rc, data, out / variant)
        except DivergenceError as exc:
            print(f"{variant}: diverged ({exc})", file=sys.stderr)
            rows.append((variant, params, repr(params / 1e6), "", "", "", "diverged"))
            failed = True
            continue
        test = _split_of(data, result.best, "test")
        test_dsc = evaluate_dataset(result.best.model(), test).dsc if len(test) else float("nan")
        rows.append((variant, params, repr(params / 1e6), repr(result.best.best_val), repr(test_dsc),
                     result.last.epoch, "ok"))
        print(f"{variant:<20} params {params:>9}  val {result.best.best_val:.4f}  test {test_dsc:.4f}")
    _write_rows(out / "reports" / "ablation.csv", ABLATION_HEADER, rows)
    _write_rows(out / "reports" / "complexity.csv",
                ("variant", "stage", "layer", "param_count", "cumulative_total"),
                complexity_ledger(base_rc.model, variants))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    def show(r):
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<40} max rel err {r.max_rel_err:.3e} (tol {r.tol:g}, n={r.checked})",
              flush=True)

    rows = run_suite(include_model=not args.no_model, seed=args.seed, progress=show)
    failures = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failures)}/{len(rows)} checks passed")
    if args.out:
        out = Path(args.out)
        (out / "config.resolved").parent.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(f"seed: {args.seed}\nmodel: {not args.no_model}\n")
        _write_rows(out / "reports" / "gradcheck.csv", ("check", "max_rel_err", "tol", "checked", "passed"),
                    [(r.name, repr(r.max_rel_err), r.tol, r.checked, r.passed) for r in rows])
    return EXIT_RUNTIME if failures else EXIT_OK


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap kernel parallelism (default: $MED2D_THREADS, else all cores)")

    def config_args(p):
        p.add_argument("--config", help="YAML run config with model.* / train.* / data.* keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    parser = _Parser(prog="med2d", description="Med-2D SegNet segmentation toolkit")
    # accepted before or after the subcommand
    parser.add_argument("--threads", dest="threads_global", type=int, default=None, help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("schedule", parents=[common], help="print the filter schedule")
    p.add_argument("--r", type=float, default=DEFAULT_RATIO)
    p.add_argument("--f1", type=int, default=32)
    p.add_argument("--f2", type=int, default=24)
    p.add_argument("--depth", type=int, default=11)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("summary", parents=[common], help="per-layer parameter table and complexity ledger")
    config_args(p)
    p.add_argument("--ablate", choices=sorted(VARIANTS), help="summarize an ablation variant")
    p.add_argument("--out", help="also write config.resolved and reports/complexity.csv here")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--kind", choices=("ellipses", "blobs", "vessels"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", choices=("none", "default"), default="none", help="domain shift family")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model")
    config_args(p)
    p.add_argument("--data", help="corpus root (overrides data.corpus)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.m2sn")
    p.add_argument("--no-wall-clock", action="store_true", help="write wall_ms as null for bitwise-comparable metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--modality", default="synthetic")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="write predicted masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("xeval", parents=[common], help="zero-shot cross-corpus evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-corpus", required=True)
    p.add_argument("--test-corpora", required=True, help="comma-separated corpus roots")
    p.add_argument("--out")
    p.set_defaults(func=cmd_xeval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation matrix")
    config_args(p)
    p.add_argument("--data", help="corpus root (overrides data.corpus)")
    p.add_argument("--variants", default="all", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--no-wall-clock", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-model", action="store_true", help="skip the full-model checks")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = args.threads if args.threads is not None else args.threads_global
        apply_threads(threads if threads is not None else _default_threads())
        return args.func(args)
    except ConfigError as exc:
        print(f"med2d {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to exit code 3
        print(f"med2d {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
