"""Command-line entry point: segment | train | generate | bench | sweep | cost | ablate."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from collections.abc import Sequence
from pathlib import Path

from . import checkpoint
from . import nn as hnn
from .config import EOS, VARIANTS
from .cost import (
    DomainError,
    flops_base_step,
    flops_micro_step,
    hamburger_speedup,
    specdec_speedup,
)
from .data import decode_bytes, wrap
from .errors import ConfigError, DataError, HamburgerError, InvariantError, NumericError
from .inference import GenerationConfig, generate, sweep_confidence
from .pipeline import (
    TrainConfig,
    bench,
    evaluate_variant,
    load_corpus,
    segment_pairs,
    train_pipeline,
)
from .segmenter import SegmenterConfig, segment_records, write_jsonl

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which is reserved here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "recipe", None):
        cfg.recipe = args.recipe
    return cfg


def _model(args, cfg: TrainConfig):
    path = args.checkpoint
    if not path:
        raise ConfigError("a trained model is required: pass --checkpoint PATH")
    return checkpoint.load(path)


def _jsonl_sink(path: str | None):
    if not path:
        return None, lambda rec: None
    fh = open(path, "w", encoding="utf-8")
    return fh, lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _write_csv(rows: list[dict], path: str | None) -> None:
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if path:
            fh.close()


def cmd_segment(args) -> int:
    cfg = _config(args)
    train_c, _ = load_corpus(cfg)
    if args.checkpoint:
        model = checkpoint.load(args.checkpoint)
    else:
        cfg.steps = 0
        model = train_pipeline(cfg).model
    pairs = [wrap(p, r) for p, r in train_c.examples]
    seg_cfg = SegmenterConfig(rho=cfg.rho, percentile=cfg.percentile)
    _, profiles, tau = segment_pairs(model, pairs, seg_cfg)
    records = segment_records(train_c.records(), profiles, SegmenterConfig(tau, cfg.rho, cfg.percentile), model.config.max_steps)
    if args.out:
        write_jsonl(args.out, records)
    else:
        for rec in records:
            print(json.dumps(rec, sort_keys=True))
    print(f"tau={tau!r} examples={len(records)}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    fh, sink = _jsonl_sink(args.out)
    try:
        trained = train_pipeline(cfg, sink)
    finally:
        if fh:
            fh.close()
    if args.checkpoint:
        checkpoint.save(trained.model, args.checkpoint)
    print(
        f"tau={trained.tau!r} mean_segment_length={trained.mean_segment_length:.4f} "
        f"train_examples={len(trained.train)}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    text = Path(args.input).read_text() if args.input else sys.stdin.read()
    theta = args.theta[0] if args.theta else 0.0
    prompt_ids, _ = wrap(text.rstrip("\n"))
    tokens, trace = generate(model, prompt_ids, GenerationConfig(args.max_new_tokens, theta))
    if EOS in tokens and tokens.index(EOS) != len(tokens) - 1:
        raise InvariantError("tokens emitted after EOS")
    # raw bytes: an undertrained model may emit invalid UTF-8
    sys.stdout.flush()
    sys.stdout.buffer.write(decode_bytes(tokens) + b"\n")
    sys.stdout.flush()
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            trace.write_jsonl(fh)
    return EXIT_OK


def _eval_prompts(cfg: TrainConfig, n: int):
    _, eval_c = load_corpus(cfg)
    pairs = [wrap(p, r) for p, r in eval_c.examples[:n]]
    return [p for p, _ in pairs], [r for _, r in pairs]


def cmd_bench(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    thetas = args.theta or [0.0, 1.0]
    prompts, _ = _eval_prompts(cfg, 16)
    rows = bench(model, prompts, thetas, workload=args.workload)
    ref = rows[-1]["tps"]
    for r in rows:
        r["ratio_vs_last"] = r["tps"] / ref
    _write_csv(rows, args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    thetas = sorted(args.theta or [0.0, 0.25, 0.5, 0.6, 0.75, 1.0])
    prompts, refs = _eval_prompts(cfg, args.limit)
    rows = sweep_confidence(model, prompts, thetas, refs, max_new_tokens=args.max_new_tokens)
    out = [{"theta": r.theta, "compression": r.compression, "exact_match": r.exact_match} for r in rows]
    for a, b in zip(rows, rows[1:]):
        if b.compression > a.compression:
            _write_csv(out, args.out)
            raise InvariantError(f"compression rose from {a.compression} to {b.compression} as theta increased")
    _write_csv(out, args.out)
    return EXIT_OK


def cmd_cost(args) -> int:
    from .config import ModelConfig

    mc = ModelConfig()
    rows = []
    for n, C, c, alpha, c_ratio, S in itertools.product(
        args.n or [4], args.C or [None], args.c or [None], args.alpha or [0.9], args.c_ratio or [0.25], args.S or [1024]
    ):
        C_val = flops_base_step(mc, S) if C is None else C
        c_val = flops_micro_step(mc, context_length=S) if c is None else c
        try:
            r = hamburger_speedup(n, C_val, c_val)
        except DomainError:
            r = float("nan")
        rows.append(
            {
                "n": n,
                "S": S,
                "C": C_val,
                "c": c_val,
                "hamburger_speedup": r,
                "alpha": alpha,
                "c_ratio": c_ratio,
                "specdec_speedup": specdec_speedup(alpha, int(n), c_ratio),
            }
        )
    _write_csv(rows, args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = args.variant or list(VARIANTS)
    rows, shared = [], None
    for v in variants:
        cfg.variant = v
        trained = train_pipeline(cfg, pretrained=shared)
        shared = trained.pretrained
        res = evaluate_variant(trained)
        rows.append({"variant": v, **res, "mean_segment_length": trained.mean_segment_length})
    _write_csv(rows, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hamburger", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="training/run configuration (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file (metrics JSONL or CSV table)")
        sp.add_argument("--checkpoint", help="model checkpoint to write (train) or read")
        sp.add_argument("--recipe", help="synthetic corpus recipe, e.g. pattern+copy")
        return sp

    common(sub.add_parser("segment", help="entropy-segment a corpus"))
    common(sub.add_parser("train", help="pretrain, segment and adapt"))
    g = common(sub.add_parser("generate", help="generate from a prompt on stdin or --input"))
    g.add_argument("--input")
    g.add_argument("--theta", type=float, action="append")
    g.add_argument("--trace")
    g.add_argument("--max-new-tokens", type=int, default=256)
    b = common(sub.add_parser("bench", help="tokens/sec per confidence level"))
    b.add_argument("--theta", type=float, action="append")
    b.add_argument("--workload", type=int, default=256)
    s = common(sub.add_parser("sweep", help="compression and exact match per confidence level"))
    s.add_argument("--theta", type=float, action="append")
    s.add_argument("--limit", type=int, default=100)
    s.add_argument("--max-new-tokens", type=int, default=64)
    c = sub.add_parser("cost", help="analytic speedup table")
    c.add_argument("--n", type=float, action="append")
    c.add_argument("--C", type=float, action="append")
    c.add_argument("--c", type=float, action="append")
    c.add_argument("--alpha", type=float, action="append")
    c.add_argument("--c-ratio", type=float, action="append")
    c.add_argument("--S", type=int, action="append")
    c.add_argument("--out")
    a = common(sub.add_parser("ablate", help="train and score the architecture variants"))
    a.add_argument("--variant", action="append", choices=sorted(VARIANTS))
    return p


COMMANDS = {
    "segment": cmd_segment,
    "train": cmd_train,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
    "ablate": cmd_ablate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    hnn.set_deterministic()
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvariantError, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except HamburgerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
