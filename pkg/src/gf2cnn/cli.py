"""Command-line entry points: train, eval, quantize, compress, memplan, gradcheck.

numpy (and everything that imports it) is loaded only after ``--threads`` has
been applied to the BLAS environment variables.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("gf2cnn")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="toy-fire-net",
                        help="TOML config path or shipped config name (default: toy-fire-net)")
    common.add_argument("--checkpoint", help="input checkpoint")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="override the training/initialization seed")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives reproducible runs")

    p = argparse.ArgumentParser(prog="gf2cnn", description="GF(2) feature-map compression toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the float network")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or a fresh random net)")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    q = sub.add_parser("quantize", parents=[common], help="quantize, calibrate and finetune a float checkpoint")
    q.add_argument("--bits", type=int)
    c = sub.add_parser("compress", parents=[common], help="insert GF(2) compression blocks and finetune")
    c.add_argument("--bits", type=int)
    c.add_argument("--mode", choices=("none", "1x1", "3x3s2", "2x2s2"))
    c.add_argument("--dump-maps", action="store_true", help="also write the stored bit maps as GF2T blobs")
    m = sub.add_parser("memplan", parents=[common], help="activation memory table")
    m.add_argument("--bits", type=int, help="quantize the configured targets for a single-report run")
    m.add_argument("--mode", choices=("none", "1x1", "3x3s2", "2x2s2"))
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-5)
    gc.add_argument("--samples", type=int, default=2)
    return p


def _setup_logging() -> None:
    level = os.environ.get("GF2CNN_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


# ----------------------------------------------------------------- helpers

def _dataset(cfg, seed_override=None):
    from .data import gen_synthetic, load_mnist_idx
    from .errors import DataError

    d = cfg.data
    if d.kind == "synthetic":
        seed = d.seed if seed_override is None else seed_override
        train, test = gen_synthetic(seed, d.n, d.classes, tuple(d.shape)).split(d.train)
    else:
        train = load_mnist_idx(cfg.resolve(d.images), cfg.resolve(d.labels), d.classes)
        if d.test_images and d.test_labels:
            test = load_mnist_idx(cfg.resolve(d.test_images), cfg.resolve(d.test_labels), d.classes)
        else:
            train, test = train.split(d.train)
    if len(train) == 0 or len(test) == 0:
        raise DataError("empty train or test split")
    return train, test


def _arrays(graph, ds):
    from .errors import DataError

    x = ds.centered()
    if tuple(x.shape[1:]) != graph.input_shape:
        raise DataError(f"data shape {x.shape[1:]} does not match network input {graph.input_shape}")
    return x, ds.labels


def _train_cfg(cfg, seed, stage: str = "train"):
    from dataclasses import replace

    tc = getattr(cfg, stage)
    return tc if seed is None else replace(tc, seed=seed)


def _load_float(cfg, args):
    from .checkpoint import load_checkpoint
    from .errors import ConfigError

    if not args.checkpoint:
        raise ConfigError("this command needs --checkpoint (a float model from 'train')")
    return load_checkpoint(args.checkpoint, expect_hash=cfg.build_graph().graph_hash())


def _fresh_metrics(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


# ---------------------------------------------------------------- commands

def cmd_train(cfg, args, out: Path) -> int:
    from .checkpoint import Checkpoint, save_checkpoint
    from .trainer import train

    g = cfg.build_graph()
    tcfg = _train_cfg(cfg, args.seed)
    g.init_weights(tcfg.seed)
    tr, te = _dataset(cfg)
    x, y = _arrays(g, tr)
    hist = train(g, x, y, tcfg, _arrays(g, te), _fresh_metrics(out / "train_metrics.csv"))
    save_checkpoint(out / "float.ckpt", Checkpoint(g, tcfg.iterations, {"stage": "float"}))
    last = hist[-1] if hist else {"top1": float("nan")}
    print(f"trained {tcfg.iterations} iterations; test top-1 {last['top1']:.4f}; wrote {out / 'float.ckpt'}")
    return 0


def cmd_eval(cfg, args, out: Path) -> int:
    from .checkpoint import load_checkpoint
    from .trainer import _append_metrics, evaluate

    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        g, it = ck.graph, ck.iteration
    else:
        g, it = cfg.build_graph(), 0
        g.init_weights(cfg.train.seed if args.seed is None else args.seed)
    tr, te = _dataset(cfg)
    x, y = _arrays(g, te if args.split == "test" else tr)
    loss, top1, top5 = evaluate(g, x, y)
    _append_metrics(_fresh_metrics(out / "eval.csv"),
                    {"iteration": it, "lr": 0.0, "loss": loss, "top1": top1, "top5": top5})
    print(f"{args.split}: loss {loss:.4f} top-1 {top1:.4f} top-5 {top5:.4f} ({len(y)} samples)")
    return 0


def _retrain(cfg, args, out: Path, ccfg, stem: str):
    from dataclasses import replace

    from .checkpoint import Checkpoint, save_checkpoint
    from .errors import ConfigError
    from .trainer import retrain_from_quantized

    ck = _load_float(cfg, args)
    qcfg = cfg.quant if args.bits is None else replace(cfg.quant, bits=args.bits)
    if not qcfg.targets:
        raise ConfigError("[quant] targets is empty")
    tcfg = _train_cfg(cfg, args.seed, "finetune")
    tr, te = _dataset(cfg)
    x, y = _arrays(ck.graph, tr)
    metrics = _fresh_metrics(out / f"{stem}_metrics.csv")
    q, before, hist = retrain_from_quantized(ck.graph, x, y, qcfg, ccfg, tcfg, _arrays(ck.graph, te), metrics)
    extra = {"stage": stem, "bits": qcfg.bits, "mode": ccfg.mode if ccfg else "none"}
    save_checkpoint(out / f"{stem}.ckpt", Checkpoint(q, tcfg.iterations, extra))
    after = hist[-1]["top1"] if hist else before[1]
    print(f"{stem}: top-1 before finetune {before[1]:.4f}, after {after:.4f}; wrote {out / (stem + '.ckpt')}")
    return q, te


def cmd_quantize(cfg, args, out: Path) -> int:
    bits = args.bits if args.bits is not None else cfg.quant.bits
    _retrain(cfg, args, out, None, f"quant{bits}")
    return 0


def cmd_compress(cfg, args, out: Path) -> int:
    from dataclasses import replace

    from .errors import ConfigError

    ccfg = cfg.compression if args.mode is None else replace(cfg.compression, mode=args.mode)
    if not ccfg.enabled:
        raise ConfigError("compression mode is 'none'; pass --mode or set [compression] mode")
    bits = args.bits if args.bits is not None else cfg.quant.bits
    stored = ccfg.stored_bits or bits
    q, te = _retrain(cfg, args, out, ccfg, f"compress_{ccfg.mode}_b{bits}_s{stored}")
    if args.dump_maps:
        _dump_maps(q, te, out / "maps")
    return 0


def _dump_maps(g, ds, folder: Path) -> None:
    from .gf2 import pack_bits, save_blob
    from .nn.builders import compressed_edges

    folder.mkdir(parents=True, exist_ok=True)
    x, _ = _arrays(g, ds)
    wanted = [f"{e}:stored" for e in compressed_edges(g)]
    _, maps = g.forward(x[:8], capture=wanted)
    for e in wanted:
        path = folder / (e.replace("/", "_").replace(":", "_") + ".gf2t")
        save_blob(path, pack_bits(maps[e], 1))
        print(f"wrote {path}")


def cmd_memplan(cfg, args, out: Path) -> int:
    from .memory import Variant, build_variant, fmt_kb, memory_table, plan_memory, run_variants, table_csv

    m = cfg.memory
    overrides = args.bits is not None or args.mode is not None
    geometry = (m.geometry if m else None) or cfg.network.get("geometry")
    if m is not None and m.variants and not overrides:
        cols = run_variants(geometry, m.variants, m.rows, m.separate, m.targets, m.batch)
        text = memory_table(cols, m.title, m.places)
        (out / "memory_table.txt").write_text(text)
        (out / "memory_table.csv").write_text(table_csv(cols))
        print(text, end="")
        return 0
    targets = list((m.targets if m else None) or cfg.quant.targets)
    if overrides and not targets:
        from .errors import ConfigError

        raise ConfigError("--bits/--mode need target edges ([memory] or [quant] targets)")
    if geometry:
        v = Variant("plan", fused=bool(targets), bits=args.bits or (cfg.quant.bits if args.mode else None),
                    mode=args.mode, targets=targets if overrides else [], keep=targets)
        g, plan = build_variant(geometry, v)
    else:
        g, plan = cfg.build_graph(), cfg.fusion
        if overrides:
            v = Variant("plan", bits=args.bits or cfg.quant.bits, signed=cfg.quant.signed, mode=args.mode,
                        targets=targets)
            from .memory import apply_variant

            apply_variant(g, v, targets)
            plan = None
    rep = plan_memory(g, plan, m.batch if m else 1, (m.rows or None) if m else None,
                      (m.separate or None) if m else None, name=cfg.network.get("name", g.name))
    (out / "memory_plan.csv").write_text(rep.to_csv())
    for r in rep.rows:
        print(f"{r.label:<28} {fmt_kb(r.bytes):>10} KB{'  (kept separately)' if r.separate else ''}")
    print(f"{'Total':<28} {fmt_kb(rep.total):>10} KB   fused buffers {fmt_kb(rep.buffer_total)} KB")
    return 0


def cmd_gradcheck(cfg, args, out: Path) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .trainer import finite_diff_check

    if args.checkpoint:
        g = load_checkpoint(args.checkpoint).graph
    else:
        g = cfg.build_graph()
        g.init_weights(cfg.train.seed if args.seed is None else args.seed)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    x = rng.uniform(-1, 1, (args.samples,) + g.input_shape)
    classes = g.edges[g.output_edge].shape[0]
    y = rng.integers(0, classes, args.samples)
    rep = finite_diff_check(g, x, y, tolerance=args.tolerance)
    text = "\n".join(rep.lines()) + "\n"
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    return 0 if rep.passed else 6


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "compress": cmd_compress,
    "memplan": cmd_memplan,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    _setup_logging()

    from .config import load_config
    from .errors import GF2Error

    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except GF2Error as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (OSError): {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
