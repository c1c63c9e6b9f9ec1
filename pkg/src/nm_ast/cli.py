"""Command-line entry point: ``nm-ast <subcommand> ...``.

Exit codes: 0 ok, 1 verification failure, 2 config or I/O error,
3 architecture mismatch, 4 packing a dense checkpoint.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import compression
from .config import MODES, RunConfig, normalize_mode
from .corpus import Corpus, synthetic_corpus
from .errors import ArchitectureMismatch, ConfigError, CorruptFileError
from .model import perplexity
from .trainer import format_report, pretrain_dense, retrain_sparse, run_ablation_suite

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ARCH, EXIT_DENSE = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc.strerror}")
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"invalid config {path}: {exc}")


def _load_corpus(path: str, cfg: RunConfig) -> Corpus:
    try:
        return Corpus.from_file(path, cfg.val_fraction)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read corpus {path}: {exc.strerror}")


def _load_ckpt(path: str) -> ckpt_io.Checkpoint:
    try:
        return ckpt_io.load(path)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read checkpoint {path}: {exc.strerror}")
    except (CorruptFileError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"corrupt checkpoint {path}: {exc}")


def _metrics_path(out: str, given: str | None) -> str:
    return given or str(Path(out).with_suffix("")) + ".metrics.csv"


def _write_bytes(path, raw: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(raw)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot write {path}: {exc.strerror}")


def _save_run(result, out: str, metrics: str | None) -> None:
    _write_bytes(out, ckpt_io.to_bytes(result.checkpoint))
    mpath = _metrics_path(out, metrics)
    _write_bytes(mpath, result.metrics.to_csv().encode("utf-8"))
    print(f"wrote {out} (crc32 {ckpt_io.file_crc(out):08x}) and {mpath}")


def _ckpt_run_config(ck: ckpt_io.Checkpoint) -> RunConfig:
    stored = ck.extra.get("config")
    return RunConfig.from_dict(stored) if stored else RunConfig()


# ---------------------------------------------------------------- subcommands


def cmd_make_corpus(args) -> int:
    _write_bytes(args.out, synthetic_corpus(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {args.out}")
    return EXIT_OK


def cmd_train_dense(args) -> int:
    cfg = _load_config(args.config).replace(mode="dense_pretrain")
    corpus = _load_corpus(args.data, cfg)
    result = pretrain_dense(cfg, corpus)
    _save_run(result, args.out, args.metrics)
    print(f"val_ppl {result.checkpoint.extra['val_ppl']!r}")
    return EXIT_OK


def cmd_retrain_sparse(args) -> int:
    cfg = _load_config(args.config)
    if args.mode:
        cfg = cfg.replace(mode=normalize_mode(args.mode))
    if cfg.mode == "dense_pretrain":
        raise CliError(EXIT_CONFIG, "retrain-sparse needs a sparse mode, not dense_pretrain")
    teacher = _load_ckpt(args.teacher)
    corpus = _load_corpus(args.data, cfg)
    try:
        result = retrain_sparse(cfg, teacher.model, corpus)
    except ArchitectureMismatch as exc:
        raise CliError(EXIT_ARCH, f"teacher {args.teacher}: {exc}")
    _save_run(result, args.out, args.metrics)
    print(f"val_ppl {result.final_ppl!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    cfg = _load_config(args.config) if args.config else _ckpt_run_config(ck)
    corpus = _load_corpus(args.data, cfg)
    print(repr(perplexity(ck.model, corpus.val, cfg.seq_len, cfg.eval_batch_size)))
    return EXIT_OK


def cmd_pack(args) -> int:
    ck = _load_ckpt(args.ckpt)
    layers = ck.model.masked_layers()
    if not layers:
        raise CliError(EXIT_DENSE, f"checkpoint {args.ckpt} has no masked layers; nothing to pack")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot create {out}: {exc.strerror}")
    manifest = {"checkpoint": os.path.basename(args.ckpt), "coding": args.coding, "layers": {}}
    total_bits = total_entries = 0
    analytic_bits = Fraction(0)
    for name, lin in sorted(layers.items()):
        w = np.where(lin.mask.array, lin.weight.data, 0).astype(np.float32)
        try:
            packed = compression.pack(w, lin.mask.pattern, args.coding, mask=lin.mask.array)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"cannot pack {name}: {exc}")
        raw = compression.to_bytes(packed)
        fname = f"{name}.nmsp"
        _write_bytes(out / fname, raw)
        entries = w.size
        ratio = packed.analytic_ratio()
        manifest["layers"][name] = {
            "file": fname,
            "shape": list(w.shape),
            "pattern": str(lin.mask.pattern),
            "analytic_ratio": float(ratio),
            "stream_ratio": packed.stream_ratio(),
            "file_crc32": zlib.crc32(raw),
            "dense_crc32": zlib.crc32(np.ascontiguousarray(w).tobytes()),
            "adapter_params": lin.adapter.param_count() if lin.adapter is not None else 0,
        }
        total_entries += entries
        total_bits += compression.VALUE_BITS * packed.values.size + packed.bit_length
        analytic_bits += ratio * entries
    manifest["total"] = {
        "analytic_ratio": float(analytic_bits / total_entries),
        "stream_ratio": total_bits / (compression.DENSE_BITS * total_entries),
        "entries": total_entries,
    }
    _write_bytes(out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    print(f"packed {len(layers)} layers to {out}; total ratio {manifest['total']['analytic_ratio']:.4%}")
    return EXIT_OK


def cmd_unpack(args) -> int:
    root = Path(args.dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read manifest in {root}: {exc.strerror}")
    ck = _load_ckpt(args.ckpt) if args.ckpt else None
    failures = 0
    for name, meta in sorted(manifest["layers"].items()):
        path = root / meta["file"]
        try:
            raw = path.read_bytes()
            dense = compression.unpack(compression.from_bytes(raw))
        except OSError as exc:
            raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc.strerror}")
        except CorruptFileError as exc:
            print(f"FAIL {name}: {exc}")
            failures += 1
            continue
        ok = zlib.crc32(raw) == meta["file_crc32"] and zlib.crc32(dense.tobytes()) == meta["dense_crc32"]
        if ck is not None:
            lin = ck.model.linears[name]
            ref = np.where(lin.mask.array, lin.weight.data, 0).astype(np.float32)
            ok = ok and np.array_equal(ref.view(np.uint32), dense.view(np.uint32))
        if args.out:
            np.save(Path(args.out) / f"{name}.npy", dense)
        print(f"{'OK' if ok else 'FAIL'} {name} crc32 {zlib.crc32(dense.tobytes()):08x}")
        failures += not ok
    if args.check and failures:
        return EXIT_CHECK
    return EXIT_OK


def cmd_ratios(args) -> int:
    print(f"{'pattern':>8} {'index_bits':>10} {'fixed_%':>9} {'huffman_%':>10} {'mean_len':>9}")
    for n in range(1, args.nmax + 1):
        print(
            f"{n}:{2 * n:<5} {compression.fixed_bits(n):>10d} {100 * float(compression.fixed_ratio(n)):>9.4f} "
            f"{100 * float(compression.huffman_ratio(n)):>10.4f} {float(compression.huffman_mean_length(n)):>9.4f}"
        )
    report = compression.verify_bound(args.nmax)
    print(f"bound 3/32 = 9.375% holds for n <= {args.nmax}: {report.ok}")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    corpus = _load_corpus(args.data, cfg)
    if args.teacher:
        teacher = _load_ckpt(args.teacher).model
    else:
        teacher = pretrain_dense(cfg.replace(mode="dense_pretrain"), corpus).model
    try:
        rows = run_ablation_suite(cfg, teacher, corpus)
    except ArchitectureMismatch as exc:
        raise CliError(EXIT_ARCH, str(exc))
    report = format_report(rows)
    if args.out:
        _write_bytes(args.out, report.encode("utf-8"))
    sys.stdout.write(report)
    return EXIT_OK


def cmd_config_dump(args) -> int:
    sys.stdout.write(_load_config(args.config).to_json())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nm-ast", description="N:M sparse retraining toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-corpus", help="write the deterministic synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--bytes", type=int, default=400_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("train-dense", help="pretrain the dense teacher")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    s.set_defaults(func=cmd_train_dense)

    s = sub.add_parser("retrain-sparse", help="prune the teacher and retrain")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")
    modes = [m.replace("_", "-") for m in MODES if m != "dense_pretrain"]
    s.add_argument("--mode", choices=modes, type=lambda v: v.replace("_", "-"))
    s.set_defaults(func=cmd_retrain_sparse)

    s = sub.add_parser("eval", help="validation perplexity of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="override the run config stored in the checkpoint")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pack", help="write NMSP files for every masked layer plus a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--coding", choices=compression.CODINGS, default="huffman")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("unpack", help="decode a packed directory")
    s.add_argument("dir")
    s.add_argument("--check", action="store_true", help="exit 1 unless every layer roundtrips")
    s.add_argument("--ckpt", help="also compare against this checkpoint")
    s.add_argument("--out", help="directory for decoded .npy files")
    s.set_defaults(func=cmd_unpack)

    s = sub.add_parser("ratios", help="analytic compression ratio table")
    s.add_argument("--nmax", type=int, default=32)
    s.set_defaults(func=cmd_ratios)

    s = sub.add_parser("ablate", help="component and distillation ablations")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--teacher", help="dense checkpoint (pretrained from the config if omitted)")
    s.add_argument("--out", help="report path")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("config", help="configuration utilities")
    csub = s.add_subparsers(dest="config_command", required=True)
    d = csub.add_parser("dump", help="print the canonical form of a config (defaults if none given)")
    d.add_argument("--config")
    d.set_defaults(func=cmd_config_dump)
    return p


def _thread_limits():
    """Honour NM_AST_THREADS and NM_AST_DETERMINISTIC for the BLAS pool."""
    threads = os.environ.get("NM_AST_THREADS")
    if os.environ.get("NM_AST_DETERMINISTIC") == "1":
        threads = "1"
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    try:
        n = int(threads)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"NM_AST_THREADS must be an integer, got {threads!r}")
    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limits():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
