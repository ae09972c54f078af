"""Macro/micro-step generation loop with fused KV accounting and tracing."""

from __future__ import annotations

import json
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import torch

from .config import EOS, STOP
from .cost import flops_base_step, flops_context, flops_fuse, flops_micro_step
from .embedder import assign_position
from .errors import ArgumentError
from .hamburger import HamburgerModel
from .model import BaseModel


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 256
    confidence: float = 0.0
    ignore_eos: bool = False
    greedy: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ArgumentError(f"confidence must lie in [0, 1], got {self.confidence}")
        if not self.greedy:
            raise ArgumentError("only greedy decoding is supported")
        if self.max_new_tokens < 1:
            raise ArgumentError("max_new_tokens must be >= 1")


@dataclass
class MacroStep:
    tokens: list[int]
    stop_probs: list[float]
    decoder_calls: int
    kv_entries: int
    flops_base: float
    flops_micro: float
    flops_fuse: float = 0.0
    decoder_seconds: list[float] = field(default_factory=list)

    def record(self) -> dict:
        d = asdict(self)
        del d["decoder_seconds"]
        return d


@dataclass
class GenerationTrace:
    prompt_len: int
    steps: list[MacroStep] = field(default_factory=list)
    # wall-clock, excluded from the JSONL records
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0

    @property
    def tokens(self) -> int:
        return sum(len(s.tokens) for s in self.steps)

    @property
    def macro_steps(self) -> int:
        return len(self.steps)

    @property
    def compression_rate(self) -> float:
        return compression_rate(self)

    @property
    def decoder_calls(self) -> int:
        return sum(s.decoder_calls for s in self.steps)

    @property
    def flops_base(self) -> float:
        return sum(s.flops_base for s in self.steps)

    @property
    def flops_micro(self) -> float:
        return sum(s.flops_micro for s in self.steps)

    @property
    def flops_fuse(self) -> float:
        return sum(s.flops_fuse for s in self.steps)

    def write_jsonl(self, fh) -> None:
        for s in self.steps:
            fh.write(json.dumps(s.record(), sort_keys=True) + "\n")


def compression_rate(trace: GenerationTrace) -> float:
    """Generated tokens per macro-step (tokens per response KV entry)."""
    if trace.tokens < 1:
        raise ArgumentError("compression rate undefined for an empty generation")
    return trace.tokens / trace.macro_steps


def continue_decision(stop_prob: float, confidence: float) -> bool:
    """Keep micro-decoding only if the head says continue and P(continue) >= confidence.

    Confidence 1.0 never continues: a sigmoid cannot certify certainty, and
    1 - p rounds to exactly 1.0 in float64 for very negative stop logits.
    """
    return confidence < 1.0 and stop_prob < 0.5 and (1.0 - stop_prob) >= confidence


@torch.inference_mode()
def generate(
    model: HamburgerModel,
    prompt_ids: Sequence[int],
    config: GenerationConfig = GenerationConfig(),
    record_timing: bool = False,
) -> tuple[list[int], GenerationTrace]:
    """Greedy hierarchical decoding.

    Each macro-step takes token 1 from the base LM head, then lets the micro
    decoder add tokens while the stop rule allows, then fuses the emitted run
    into the one embedding the next base forward consumes.
    """
    if not prompt_ids:
        raise ArgumentError("prompt must be non-empty")
    cfg = model.config
    base, decoder = model.base, model.decoder
    use_head = cfg.stop_mode == "head"
    theta = config.confidence
    t_start = time.perf_counter()
    out, cache = base.prefill(prompt_ids)
    t_decode = time.perf_counter()
    last_pos = len(prompt_ids) - 1
    trace = GenerationTrace(prompt_len=len(prompt_ids), prefill_seconds=t_decode - t_start)
    emitted: list[int] = []

    def finished(tok: int) -> bool:
        return (tok == EOS and not config.ignore_eos) or len(emitted) + len(run) >= config.max_new_tokens

    while True:
        run: list[int] = []
        probs: list[float] = []
        seconds: list[float] = []
        tok = int(torch.argmax(out.logits))
        run.append(tok)
        if use_head:
            p = float(decoder.stop_prob(out.last_hidden))
            probs.append(p)
            go = continue_decision(p, theta)
        else:
            go = theta < 1.0
        go = go and cfg.max_steps > 1 and not finished(tok)
        calls = 0
        micro = 0.0
        context = None
        prior = None
        while go:
            if context is None:
                context = decoder.build_context(out.taps)
                micro += flops_context(cfg)
                prior = base.tok_emb.weight[run]
            t0 = time.perf_counter() if record_timing else 0.0
            hidden = decoder.micro_decode(context, prior)
            logits = base.lm_head(hidden)
            tok = int(torch.argmax(logits))
            if record_timing:
                seconds.append(time.perf_counter() - t0)
            micro += flops_micro_step(cfg, prior_len=len(run))
            calls += 1
            if not use_head and tok == STOP:
                break
            run.append(tok)
            if use_head:
                p = float(decoder.stop_prob(hidden))
                probs.append(p)
                go = continue_decision(p, theta)
            go = go and len(run) < cfg.max_steps and not finished(tok)
            if go:
                prior = torch.cat((prior, base.tok_emb.weight[tok].unsqueeze(0)))

        step = MacroStep(
            tokens=run,
            stop_probs=probs,
            decoder_calls=calls,
            kv_entries=len(cache),
            flops_base=flops_base_step(cfg, len(cache)),
            flops_micro=micro,
            decoder_seconds=seconds,
        )
        trace.steps.append(step)
        emitted.extend(run)
        hit_eos = EOS in run and not config.ignore_eos
        if hit_eos or len(emitted) >= config.max_new_tokens:
            break
        k = len(run)
        fused = model.embedder.fuse(base.tok_emb.weight[run], k)
        step.flops_fuse = flops_fuse(cfg, k)
        last_pos = assign_position(last_pos, k)
        out = base.decode_step(fused, last_pos, cache)
    trace.decode_seconds = time.perf_counter() - t_decode
    return emitted, trace


@torch.inference_mode()
def base_greedy(
    base: BaseModel, prompt_ids: Sequence[int], max_new_tokens: int = 256, ignore_eos: bool = False
) -> list[int]:
    """Plain one-token-per-forward greedy decoding with the base model alone."""
    out, cache = base.prefill(prompt_ids)
    pos = len(prompt_ids) - 1
    tokens: list[int] = []
    while True:
        tok = int(torch.argmax(out.logits))
        tokens.append(tok)
        if (tok == EOS and not ignore_eos) or len(tokens) >= max_new_tokens:
            return tokens
        pos += 1
        out = base.decode_step(base.tok_emb.weight[tok], pos, cache)


@dataclass(frozen=True)
class SweepRow:
    theta: float
    compression: float
    exact_match: float | None
    tokens: int
    macro_steps: int


def sweep_confidence(
    model: HamburgerModel,
    prompts: Sequence[Sequence[int]],
    thetas: Iterable[float],
    references: Sequence[Sequence[int]] | None = None,
    max_new_tokens: int = 256,
) -> list[SweepRow]:
    """Corpus-level compression (and exact match, given references) per confidence level."""
    thetas = list(thetas)
    if thetas != sorted(thetas):
        raise ArgumentError("confidence levels must be sorted ascending")
    rows = []
    for theta in thetas:
        cfg = GenerationConfig(max_new_tokens=max_new_tokens, confidence=theta)
        tokens = steps = hits = 0
        for i, prompt in enumerate(prompts):
            out, trace = generate(model, prompt, cfg)
            tokens += trace.tokens
            steps += trace.macro_steps
            if references is not None:
                hits += list(out) == list(references[i])
        em = hits / len(prompts) if references is not None else None
        rows.append(SweepRow(theta, tokens / steps, em, tokens, steps))
    return rows
