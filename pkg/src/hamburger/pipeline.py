"""End-to-end recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import torch

from . import nn as hnn
from .config import ModelConfig, variant_config
from .data import Corpus, held_out, synth_corpus, wrap
from .errors import ConfigError
from .hamburger import HamburgerModel, build_model
from .inference import GenerationConfig, base_greedy, generate
from .segmenter import (
    EntropyProfile,
    SegmenterConfig,
    batch_entropies,
    compute_threshold,
    segment,
    validate,
)
from .trainer import Trainer, TrainingExample, batches, eval_token_accuracy


@dataclass
class TrainConfig:
    recipe: str = "pattern+copy"
    corpus: str | None = None
    corpus_size: int = 4000
    eval_size: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "full"
    percentile: float = 70.0
    rho: float = 1.0
    lam: float = 1.0
    batch_size: int = 32
    pretrain_steps: int = 1500
    pretrain_lr: float = 2e-3
    steps: int = 1500
    lr_base: float = 5e-4
    lr_grafted: float = 1e-3
    warmup: int = 50
    weight_decay: float = 0.01
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config field(s): {sorted(unknown)}")
        data = dict(data)
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("corpus_size", "eval_size", "batch_size", "pretrain_steps", "steps", "warmup"):
            if not isinstance(getattr(cfg, name), int) or getattr(cfg, name) < 0:
                raise ConfigError(f"field {name!r} must be a non-negative integer")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @property
    def model_config(self) -> ModelConfig:
        return variant_config(self.model, self.variant)


@dataclass
class Trained:
    model: HamburgerModel
    train: list[TrainingExample]
    eval: list[TrainingExample]
    eval_pairs: list[tuple[list[int], list[int]]]
    tau: float
    mean_segment_length: float
    seconds: float
    pretrained: dict[str, torch.Tensor]


def load_corpus(cfg: TrainConfig) -> tuple[Corpus, Corpus]:
    if cfg.corpus:
        recs = [json.loads(line) for line in Path(cfg.corpus).read_text().splitlines() if line.strip()]
        train = Corpus(tuple((r["prompt"], r["response"]) for r in recs), "file", cfg.seed)
        return train, held_out(cfg.recipe, cfg.seed, cfg.eval_size, train)
    train = synth_corpus(cfg.recipe, cfg.seed, cfg.corpus_size)
    return train, held_out(cfg.recipe, cfg.seed, cfg.eval_size, train)


def segment_pairs(
    model: HamburgerModel, pairs: Sequence[tuple[list[int], list[int]]], seg_cfg: SegmenterConfig, tau: float | None = None
) -> tuple[list[TrainingExample], list[EntropyProfile], float]:
    profiles = batch_entropies(model.base, pairs)
    if tau is None:
        tau = compute_threshold(profiles, seg_cfg.percentile)
    cfg = SegmenterConfig(tau=tau, rho=seg_cfg.rho, percentile=seg_cfg.percentile)
    max_steps = model.config.max_steps
    out = []
    for (p, r), prof in zip(pairs, profiles):
        seg = segment(prof, cfg, max_steps)
        problems = validate(seg, len(r), max_steps)
        if problems:
            raise AssertionError(f"invalid segmentation: {problems}")
        out.append(TrainingExample.from_segmentation(p, r, seg))
    return out, profiles, tau


def run_phase(
    trainer: Trainer,
    examples: Sequence[TrainingExample],
    steps: int,
    batch_size: int,
    seed: int,
    phase: str,
    sink: Callable[[dict], None] | None = None,
) -> None:
    for idx in batches(len(examples), batch_size, steps, seed):
        rec = trainer.train_step([examples[i] for i in idx])
        if sink is not None:
            sink({"phase": phase, **rec})


def train_pipeline(
    cfg: TrainConfig, sink: Callable[[dict], None] | None = None, pretrained: dict[str, torch.Tensor] | None = None
) -> Trained:
    """Pretrain the base on next-token SFT, segment by its entropies, then adapt with fused rollouts.

    Passing ``pretrained`` (a base state dict, see ``Trained.pretrained``)
    skips pretraining and grafts fresh modules onto those weights.
    """
    t0 = time.perf_counter()
    hnn.set_deterministic(cfg.seed)
    train_c, eval_c = load_corpus(cfg)
    pairs = [wrap(p, r) for p, r in train_c.examples]
    eval_pairs = [wrap(p, r) for p, r in eval_c.examples]
    model = build_model(cfg.model_config, cfg.seed)
    if pretrained is not None:
        model.base.load_state_dict(pretrained)
    else:
        pre = Trainer(model, cfg.pretrain_lr, cfg.pretrain_lr, cfg.pretrain_steps, cfg.warmup, cfg.weight_decay, mode="sft")
        singles = [TrainingExample.singletons(p, r) for p, r in pairs]
        run_phase(pre, singles, cfg.pretrain_steps, cfg.batch_size, cfg.seed, "pretrain", sink)
    snapshot = {k: v.detach().clone() for k, v in model.base.state_dict().items()}
    seg_cfg = SegmenterConfig(rho=cfg.rho, percentile=cfg.percentile)
    model.eval()
    train, _, tau = segment_pairs(model, pairs, seg_cfg)
    evals, _, _ = segment_pairs(model, eval_pairs, seg_cfg, tau)
    lengths = [len(s) for ex in train for s in ex.response_segments]
    trainer = Trainer(model, cfg.lr_base, cfg.lr_grafted, cfg.steps, cfg.warmup, cfg.weight_decay, cfg.lam)
    run_phase(trainer, train, cfg.steps, cfg.batch_size, cfg.seed + 1, "adapt", sink)
    model.eval()
    return Trained(
        model, train, evals, eval_pairs, tau, sum(lengths) / len(lengths), time.perf_counter() - t0, snapshot
    )


def exact_match(model: HamburgerModel, pairs, confidence: float, max_new_tokens: int = 64) -> tuple[float, float]:
    """(fraction of responses reproduced exactly, corpus compression rate)."""
    cfg = GenerationConfig(max_new_tokens=max_new_tokens, confidence=confidence)
    hits = tokens = steps = 0
    for p, r in pairs:
        out, trace = generate(model, p, cfg)
        hits += out == list(r)
        tokens += trace.tokens
        steps += trace.macro_steps
    return hits / len(pairs), tokens / steps


def base_exact_match(model: HamburgerModel, pairs, max_new_tokens: int = 64) -> float:
    return sum(base_greedy(model.base, p, max_new_tokens) == list(r) for p, r in pairs) / len(pairs)


def bench(model: HamburgerModel, prompts, thetas: Sequence[float], workload: int = 256, repeats: int = 3) -> list[dict]:
    """Decode-phase tokens/sec per confidence level over a fixed token workload.

    Prompts are cycled until ``workload`` tokens have been generated; prompt
    prefill is excluded from the timing (it is identical at every level) and
    the best of ``repeats`` timings is kept.
    """
    rows = []
    for theta in thetas:
        best = None
        for _ in range(repeats):
            produced, seconds, steps = 0, 0.0, 0
            i = 0
            while produced < workload:
                p = prompts[i % len(prompts)]
                i += 1
                cfg = GenerationConfig(max_new_tokens=workload - produced, confidence=theta)
                _, trace = generate(model, p, cfg)
                seconds += trace.decode_seconds
                produced += trace.tokens
                steps += trace.macro_steps
            if best is None or seconds < best[1]:
                best = (produced, seconds, steps)
        produced, seconds, steps = best
        rows.append({"theta": theta, "tokens": produced, "macro_steps": steps, "seconds": seconds, "tps": produced / seconds})
    return rows


def evaluate_variant(trained: Trained) -> dict:
    overall, rest = eval_token_accuracy(trained.model, trained.eval)
    return {"overall_acc": overall, "beyond_first_acc": rest}
