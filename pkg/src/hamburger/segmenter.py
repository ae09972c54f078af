"""Entropy-driven partition of responses into macro-step segments."""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import torch

from .errors import ArgumentError, DataError
from .model import BaseModel


@dataclass(frozen=True)
class EntropyProfile:
    entropies: tuple[float, ...]

    def __post_init__(self) -> None:
        for e in self.entropies:
            if not math.isfinite(e) or e < 0:
                raise DataError(f"entropy {e} must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.entropies)


@dataclass(frozen=True)
class Segmentation:
    boundaries: tuple[tuple[int, int], ...]

    @property
    def lengths(self) -> list[int]:
        return [n for _, n in self.boundaries]

    def split(self, seq: Sequence[int]) -> list[list[int]]:
        return [list(seq[s : s + n]) for s, n in self.boundaries]

    @classmethod
    def from_lengths(cls, lengths: Iterable[int]) -> Segmentation:
        out, start = [], 0
        for n in lengths:
            out.append((start, int(n)))
            start += int(n)
        return cls(tuple(out))


@dataclass(frozen=True)
class SegmenterConfig:
    tau: float = 0.0
    rho: float = 1.0
    percentile: float = 70.0

    def __post_init__(self) -> None:
        if not 0 < self.rho <= 1:
            raise ArgumentError(f"rho must lie in (0, 1], got {self.rho}")
        if self.tau < 0:
            raise ArgumentError(f"tau must be >= 0, got {self.tau}")


@torch.no_grad()
def conditional_entropies(
    model: BaseModel, prompt_ids: Sequence[int], response_ids: Sequence[int]
) -> EntropyProfile:
    """Entropy (nats) of the teacher-forced next-token distribution predicting each response token."""
    return batch_entropies(model, [(prompt_ids, response_ids)])[0]


def entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    # 0·log 0 terms come out as 0·(-inf) = nan otherwise
    return -torch.where(logp.isfinite(), logp.exp() * logp, torch.zeros_like(logp)).sum(-1)


@torch.no_grad()
def batch_entropies(
    model: BaseModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size: int = 64
) -> list[EntropyProfile]:
    out: list[EntropyProfile] = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        seqs = [list(p) + list(r[:-1]) for p, r in chunk]
        t = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), t, dtype=torch.long)
        valid = torch.zeros(len(seqs), t, dtype=torch.bool)
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = torch.tensor(s)
            valid[b, : len(s)] = True
        positions = torch.arange(t).expand(len(seqs), t)
        _, last = model.forward_embeddings(model.embed_ids(ids), positions, valid)
        ent = entropy_from_logits(model.lm_head(last))
        for b, (p, r) in enumerate(chunk):
            if not r:
                out.append(EntropyProfile(()))
                continue
            start = len(p) - 1
            out.append(EntropyProfile(tuple(ent[b, start : start + len(r)].clamp_min(0.0).tolist())))
    return out


def compute_threshold(corpus_profiles: Sequence[EntropyProfile], percentile: float) -> float:
    """Nearest-rank percentile of all pooled entropies."""
    pooled = sorted(e for prof in corpus_profiles for e in prof.entropies)
    if not pooled:
        raise ArgumentError("cannot derive a threshold from an empty corpus")
    if not 0 <= percentile <= 100:
        raise ArgumentError(f"percentile {percentile} outside [0, 100]")
    rank = max(1, math.ceil(percentile / 100 * len(pooled)))
    return pooled[rank - 1]


def segment(profile: EntropyProfile | Sequence[float], config: SegmenterConfig, max_steps: int) -> Segmentation:
    """Greedy left-to-right grouping.

    Token j joins the open segment (started at s) when the segment is
    shorter than ``max_steps``, ``e_j < tau`` and ``e_j <= rho * max(e_s, 1e-6)``;
    otherwise it opens a new segment.
    """
    ent = profile.entropies if isinstance(profile, EntropyProfile) else tuple(profile)
    if not ent:
        return Segmentation(())
    bounds: list[tuple[int, int]] = []
    start, length = 0, 1
    for j in range(1, len(ent)):
        joins = (
            length < max_steps
            and ent[j] < config.tau
            and ent[j] <= config.rho * max(ent[start], 1e-6)
        )
        if joins:
            length += 1
        else:
            bounds.append((start, length))
            start, length = j, 1
    bounds.append((start, length))
    return Segmentation(tuple(bounds))


def validate(seg: Segmentation, m: int, max_steps: int | None = None) -> list[str]:
    """Violations of the partition invariants; an empty list means valid."""
    problems = []
    expected = 0
    for start, length in seg.boundaries:
        if start > expected:
            problems.append(f"gap at index {expected}")
        elif start < expected:
            problems.append(f"overlap at index {start}")
        if length < 1:
            problems.append(f"empty segment at index {start}")
        if max_steps is not None and length > max_steps:
            problems.append(f"length {length} at index {start} exceeds max_steps {max_steps}")
        expected = start + length
    if expected != m:
        problems.append(f"segments cover [0, {expected}) but response has {m} tokens")
    return problems


def segment_records(
    records: Iterable[dict],
    profiles: Sequence[EntropyProfile],
    config: SegmenterConfig,
    max_steps: int,
) -> list[dict]:
    """Attach "entropies" and "segments" fields to prompt/response records."""
    out = []
    for rec, prof in zip(records, profiles):
        seg = segment(prof, config, max_steps)
        out.append(
            {
                "prompt": rec["prompt"],
                "response": rec["response"],
                "entropies": list(prof.entropies),
                "segments": [list(b) for b in seg.boundaries],
            }
        )
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(json.dumps(rec, sort_keys=True) + "\n" for rec in records)


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
