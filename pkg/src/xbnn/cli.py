"""Command-line entry point: training, evaluation, kernel benchmarking, the
analytic speedup/memory models, and the ablation runner. Batch jobs only; all
tabular output goes to CSV files so external tools can plot it.

Heavy imports happen inside the command handlers so thread-pool environment
variables (XBN_THREADS, and forced single-thread mode for bench) can be set
before numpy loads its BLAS.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import dataclass
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(count: str) -> None:
    for var in _THREAD_VARS:
        os.environ.setdefault(var, count)


if os.environ.get("XBN_THREADS"):
    _set_threads(os.environ["XBN_THREADS"])


OPS_PER_WORD = 64  # binary ops one CPU word carries per cycle


def speedup_model(c: int, n_w: int, ops_per_word: int = OPS_PER_WORD) -> float:
    """Theoretical speedup of the XNOR path over full precision for channel
    count c and filter area n_w; saturates at ops_per_word as c*n_w grows."""
    if c < 1 or n_w < 1:
        raise ValueError("c and n_w must be >= 1")
    return ops_per_word * c * n_w / (c * n_w + ops_per_word)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    command: str
    arch: str | None = None
    data: str | None = None
    model: str | None = None
    out: str = "out"
    mode: str = "full"
    block_order: str = "B-A-C-P"
    optimizer: str = ""
    schedule: str = "step"
    lr: float = 0.01
    decay_factor: float = 0.1
    decay_every: int = 2
    poly_power: float = 4.0
    momentum: float = 0.9
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    subset: int = 0
    seeds: int = 3
    filters: int = 32
    k_bits: int = 1
    gradient_variant: str = "indicator"
    binary_gradient: bool = False
    no_clamp: bool = False
    quick: bool = False
    c: int = 0
    nw: int = 0
    split: str = "val"
    fmt: str = "IDX"


def _write_csv(path, fieldnames, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# architecture config parsing

_ARCH_KEYS = {"out", "k", "stride", "pad", "learned_scale",
              "binarize_input", "binarize_weights"}


def parse_arch_text(text: str):
    """Line-oriented architecture format: one layer per line, '#' comments.

    Example:
        conv out=16 k=5 pad=2
        batchnorm
        relu
        maxpool k=2
        binconv out=32 k=3 pad=1
        conv out=10        # no k: full spatial extent (fully connected)
    """
    from .nn import LayerSpec

    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        kwargs = {}
        for token in parts[1:]:
            if "=" not in token:
                raise UsageError(f"arch line {lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            if key not in _ARCH_KEYS:
                raise UsageError(f"arch line {lineno}: unknown key {key!r}")
            if key in ("learned_scale", "binarize_input", "binarize_weights"):
                kwargs[key] = value not in ("0", "false", "False")
            elif key == "out":
                kwargs["out_ch"] = int(value)
            else:
                kwargs[key] = int(value)
        try:
            specs.append(LayerSpec(kind=kind, **kwargs))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"arch line {lineno}: {exc}") from exc
    if not specs:
        raise UsageError("architecture file defines no layers")
    return specs


def load_arch(path):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"architecture file not found: {p}")
    return parse_arch_text(p.read_text())


# ---------------------------------------------------------------------------
# train / eval


def _load_splits(cfg: RunConfig):
    from .data import ingest

    train = ingest(cfg.data, cfg.fmt, "train")
    val = ingest(cfg.data, cfg.fmt, "val")
    if cfg.subset:
        train = train.subset(cfg.subset)
        val = val.subset(max(cfg.subset // 5, 1))
    train = train.normalized()
    val = val.normalized(train.stats)
    return train, val


def _make_sched(cfg: RunConfig, epochs: int):
    from .train import PolynomialDecay, StepDecay

    if cfg.schedule == "step":
        return StepDecay(base_lr=cfg.lr, factor=cfg.decay_factor, every=cfg.decay_every)
    if cfg.schedule == "poly":
        return PolynomialDecay(base_lr=cfg.lr, power=cfg.poly_power, total_epochs=epochs)
    raise UsageError(f"unknown schedule {cfg.schedule!r}")


def _default_optimizer(mode: str) -> str:
    # weight-only binarization trains well with SGD+momentum; fully binarized
    # nets converge faster with Adam
    return "adam" if mode == "xnor" else "sgd"


def cmd_train(cfg: RunConfig) -> int:
    from .modelio import save
    from .nn import apply_mode, build_network
    from .train import fit, make_optimizer

    if not cfg.arch or not cfg.data:
        raise UsageError("train requires --arch and --data")
    specs = apply_mode(load_arch(cfg.arch), cfg.mode)
    train_ds, val_ds = _load_splits(cfg)
    net = build_network(
        specs, train_ds.images.shape[1:], seed=cfg.seed,
        ste_variant=cfg.gradient_variant, k_bits=cfg.k_bits,
        binary_gradient=cfg.binary_gradient,
    )
    opt_kind = cfg.optimizer or _default_optimizer(cfg.mode)
    opt = make_optimizer(opt_kind, cfg.lr)
    sched = _make_sched(cfg, cfg.epochs)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    history = fit(net, train_ds, val_ds, cfg.epochs, opt, sched,
                  batch_size=cfg.batch_size, seed=cfg.seed,
                  clamp=not cfg.no_clamp, verbose=True)
    history.write_csv(out / "history.csv", cfg.seed)
    save(net, out / "model.xbn")
    if history.rows:
        last_val = [r for r in history.rows if r["split"] == "val"]
        if last_val:
            print(f"final val top1={last_val[-1]['top1']:.4f} topk={last_val[-1]['topk']:.4f}")
    print(f"wrote {out / 'history.csv'} and {out / 'model.xbn'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .data import ingest
    from .modelio import load
    from .train import evaluate

    if not cfg.model or not cfg.data:
        raise UsageError("eval requires --model and --data")
    net = load(cfg.model)
    try:
        stats = ingest(cfg.data, cfg.fmt, "train").normalized().stats
    except Exception:
        stats = None  # fall back to the split's own stats
    ds = ingest(cfg.data, cfg.fmt, cfg.split).normalized(stats)
    top1, topk, loss = evaluate(net, ds)
    print(f"top1={top1:.4f} top5={topk:.4f} loss={loss:.4f} n={ds.n}")
    return 0


def cmd_pack(cfg: RunConfig) -> int:
    from .modelio import load, save

    if not cfg.model:
        raise UsageError("pack requires --model")
    out = Path(cfg.out)
    if out.is_dir() or not out.suffix:
        out.mkdir(parents=True, exist_ok=True)
        out = out / (Path(cfg.model).stem + "_packed.xbn")
    net = load(cfg.model)
    save(net, out, pack_binarized=True)
    print(f"wrote {out} ({out.stat().st_size} bytes, was {Path(cfg.model).stat().st_size})")
    return 0


def cmd_describe(cfg: RunConfig) -> int:
    from .modelio import describe, load

    if not cfg.model:
        raise UsageError("describe requires --model")
    print(describe(load(cfg.model)))
    return 0


def cmd_speedup(cfg: RunConfig) -> int:
    if cfg.c and cfg.nw:
        print(f"{speedup_model(cfg.c, cfg.nw):.2f}")
        return 0
    print(f"{'c':>6} {'n_w':>5} {'speedup':>8}")
    for c in (1, 3, 8, 32, 64, 128, 256, 512, 1024):
        for nw in (1, 9, 25, 49):
            print(f"{c:>6} {nw:>5} {speedup_model(c, nw):>8.2f}")
    return 0


# ---------------------------------------------------------------------------
# kernel benchmark


def _time_call(fn, min_time: float = 0.05):
    """Average seconds per call, growing the repetition count until the
    measured span comfortably exceeds timer resolution."""
    from time import perf_counter

    fn()  # warm-up
    reps = 1
    while True:
        t0 = perf_counter()
        for _ in range(reps):
            fn()
        dt = perf_counter() - t0
        if dt >= min_time:
            return dt / reps, reps
        reps = max(reps * 2, int(reps * min_time / max(dt, 1e-9)) + 1)


def bench_case(c: int, filt: int, out_extent: int, n_filters: int, seed: int,
               min_time: float = 0.05) -> dict:
    import numpy as np

    from .binarize import binarize_weights
    from .kernels import OpCounters, conv2d_reference, conv_xnor_layer
    from .tensor import ConvGeometry

    rng = np.random.default_rng(seed)
    h_in = out_extent + filt - 1
    I = rng.normal(size=(c, h_in, h_in)).astype(np.float32)
    bank = rng.normal(size=(n_filters, c, filt, filt)).astype(np.float32)
    geom = ConvGeometry(filt_hw=(filt, filt))
    filters = [binarize_weights(w) for w in bank]

    ref_s, ref_reps = _time_call(lambda: conv2d_reference(I, bank, geom), min_time)
    xnor_s, xnor_reps = _time_call(lambda: conv_xnor_layer(I, filters, geom), min_time)
    counters = OpCounters()
    conv_xnor_layer(I, filters, geom, counters)
    return {
        "kernel": "conv_xnor",
        "c": c,
        "n_w": filt * filt,
        "n_i": out_extent * out_extent,
        "filters": n_filters,
        "reps": max(ref_reps, xnor_reps),
        "ref_ms": ref_s * 1e3,
        "xnor_ms": xnor_s * 1e3,
        "speedup_measured": ref_s / xnor_s,
        "speedup_model": speedup_model(c, filt * filt),
        "real_mul": counters.real_mul,
        "real_add": counters.real_add,
        "xnor_word": counters.xnor_word,
        "popcount_word": counters.popcount_word,
    }


def bench_kernels(cfg: RunConfig) -> list[dict]:
    """Channel and filter-size sweeps with the fixed counterpart parameters
    c=256, 14x14 output, 3x3 filters."""
    _set_threads("1")
    min_time = 0.02 if cfg.quick else 0.05
    channel_sweep = (1, 2, 4, 8, 16, 64, 256, 1024)
    filter_sweep = (1, 3, 5, 7, 9, 11)
    if cfg.quick:
        channel_sweep = (1, 8, 64, 256)
        filter_sweep = (1, 3, 7)
    rows = []
    for c in channel_sweep:
        rows.append(bench_case(c, 3, 14, cfg.filters, cfg.seed, min_time))
    for filt in filter_sweep:
        rows.append(bench_case(256, filt, 14, cfg.filters, cfg.seed, min_time))
    for row in rows:
        row["seed"] = cfg.seed
    return rows


def cmd_bench(cfg: RunConfig) -> int:
    rows = bench_kernels(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0].keys())
    _write_csv(out / "bench.csv", fields, rows)
    for row in rows:
        print(f"c={row['c']:>5} n_w={row['n_w']:>3}: measured {row['speedup_measured']:6.1f}x "
              f"(model {row['speedup_model']:6.2f}x)")
    print(f"wrote {out / 'bench.csv'}")
    return 0


# ---------------------------------------------------------------------------
# ablations


def _ablation_arch(study: str, variant: str):
    from .nn import LayerSpec, apply_mode, conv_block

    if study == "scale":
        specs = [
            LayerSpec(kind="conv", out_ch=12, k=3, pad=1),
            LayerSpec(kind="batchnorm"),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool", k=2),
            LayerSpec(kind="binconv", out_ch=24, k=3, pad=1),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool", k=2),
            LayerSpec(kind="conv", out_ch=10),
        ]
        specs = apply_mode(specs, "bwn")
        if variant == "learned":
            for s in specs:
                if s.binarize_weights:
                    s.learned_scale = True
        return specs, "bwn"
    if study == "block-order":
        specs = [
            LayerSpec(kind="conv", out_ch=12, k=3, pad=1),
            LayerSpec(kind="maxpool", k=2),
        ]
        specs += conv_block(variant, out_ch=24, k=3, pad=1, pool=2)
        specs += [LayerSpec(kind="conv", out_ch=10)]
        return apply_mode(specs, "xnor"), "xnor"
    raise UsageError(f"unknown study {study!r}")


def run_ablation(cfg: RunConfig) -> list[dict]:
    from .nn import build_network
    from .train import evaluate, fit, make_optimizer

    train_full, val = _load_splits(cfg)
    rows = []
    for study, variants in (("scale", ("formula", "learned")),
                            ("block-order", ("C-B-A-P", "B-A-C-P"))):
        for variant in variants:
            for seed in range(cfg.seeds):
                specs, mode = _ablation_arch(study, variant)
                net = build_network(specs, train_full.images.shape[1:], seed=seed)
                opt = make_optimizer(_default_optimizer(mode), cfg.lr)
                sched = _make_sched(cfg, cfg.epochs)
                fit(net, train_full, None, cfg.epochs, opt, sched,
                    batch_size=cfg.batch_size, seed=seed)
                top1, topk, _ = evaluate(net, val)
                rows.append({"study": study, "variant": variant, "seed": seed,
                             "epochs": cfg.epochs, "val_top1": round(top1, 6),
                             "val_topk": round(topk, 6)})
    return rows


def cmd_ablate(cfg: RunConfig) -> int:
    import numpy as np

    if not cfg.data:
        raise UsageError("ablate requires --data")
    rows = run_ablation(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablate.csv",
               ["study", "variant", "seed", "epochs", "val_top1", "val_topk"], rows)
    for study in ("scale", "block-order"):
        for variant in sorted({r["variant"] for r in rows if r["study"] == study}):
            accs = [r["val_top1"] for r in rows if r["study"] == study and r["variant"] == variant]
            print(f"{study:<12} {variant:<10} top1 {np.mean(accs):.4f} +- {np.std(accs):.4f} "
                  f"over {len(accs)} seeds")
    print(f"wrote {out / 'ablate.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> _Parser:
    parser = _Parser(prog="xbnn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p_train = sub.add_parser("train", help="train a network from an arch config")
    add_common(p_train)
    p_train.add_argument("--arch", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--format", dest="fmt", default="IDX", choices=["IDX", "CIFAR"])
    p_train.add_argument("--mode", default="full", choices=["full", "bwn", "xnor"])
    p_train.add_argument("--epochs", type=int, default=5)
    p_train.add_argument("--batch-size", type=int, default=64)
    p_train.add_argument("--lr", type=float, default=0.01)
    p_train.add_argument("--optimizer", default="", choices=["", "sgd", "adam"])
    p_train.add_argument("--schedule", default="step", choices=["step", "poly"])
    p_train.add_argument("--decay-factor", type=float, default=0.1)
    p_train.add_argument("--decay-every", type=int, default=2)
    p_train.add_argument("--poly-power", type=float, default=4.0)
    p_train.add_argument("--subset", type=int, default=0)
    p_train.add_argument("--k-bits", type=int, default=1)
    p_train.add_argument("--gradient-variant", default="indicator",
                         choices=["indicator", "scaled"])
    p_train.add_argument("--binary-gradient", action="store_true")
    p_train.add_argument("--no-clamp", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a saved model")
    add_common(p_eval)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--format", dest="fmt", default="IDX", choices=["IDX", "CIFAR"])
    p_eval.add_argument("--split", default="val", choices=["train", "val"])

    p_bench = sub.add_parser("bench", help="benchmark kernels and write CSV")
    add_common(p_bench)
    p_bench.add_argument("--filters", type=int, default=32)
    p_bench.add_argument("--quick", action="store_true")

    p_ablate = sub.add_parser("ablate", help="run the scale and block-order studies")
    add_common(p_ablate)
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--format", dest="fmt", default="IDX", choices=["IDX", "CIFAR"])
    p_ablate.add_argument("--seeds", type=int, default=3)
    p_ablate.add_argument("--epochs", type=int, default=2)
    p_ablate.add_argument("--batch-size", type=int, default=64)
    p_ablate.add_argument("--lr", type=float, default=0.01)
    p_ablate.add_argument("--schedule", default="step", choices=["step", "poly"])
    p_ablate.add_argument("--decay-factor", type=float, default=0.1)
    p_ablate.add_argument("--decay-every", type=int, default=2)
    p_ablate.add_argument("--poly-power", type=float, default=4.0)
    p_ablate.add_argument("--subset", type=int, default=0)

    p_pack = sub.add_parser("pack", help="convert a checkpoint to 1-bit weights")
    add_common(p_pack)
    p_pack.add_argument("--model", required=True)

    p_desc = sub.add_parser("describe", help="print the layer table of a model")
    add_common(p_desc)
    p_desc.add_argument("--model", required=True)

    p_speed = sub.add_parser("speedup", help="print the analytic speedup model")
    add_common(p_speed)
    p_speed.add_argument("--c", type=int, default=0)
    p_speed.add_argument("--nw", type=int, default=0)

    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "pack": cmd_pack,
    "describe": cmd_describe,
    "speedup": cmd_speedup,
}


def cli_main(argv=None) -> int:
    """Exit code 0 on success, 1 on user error, 2 on internal error."""
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help lands here
        return 0 if exc.code in (0, None) else 1
    cfg = RunConfig(command=ns.command)
    for key, value in vars(ns).items():
        if key != "command" and hasattr(cfg, key):
            setattr(cfg, key, value)
    try:
        return _COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        from .data import DatasetError
        from .modelio import ModelIOError
        from .tensor import ShapeError

        if isinstance(exc, (DatasetError, ModelIOError, ShapeError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        import traceback

        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
