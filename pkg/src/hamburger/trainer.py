"""Supervised fine-tuning on segmented responses with fully expanded micro rollouts."""

from __future__ import annotations

import math
import random
from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import torch

from . import nn as hnn
from .config import PAD, STOP
from .errors import DataError, NumericError
from .hamburger import HamburgerModel
from .model import BaseModel
from .segmenter import Segmentation


@dataclass(frozen=True)
class TrainingExample:
    prompt_ids: tuple[int, ...]
    response_segments: tuple[tuple[int, ...], ...]

    @property
    def response_ids(self) -> list[int]:
        return [t for seg in self.response_segments for t in seg]

    @classmethod
    def from_segmentation(
        cls, prompt_ids: Sequence[int], response_ids: Sequence[int], seg: Segmentation
    ) -> TrainingExample:
        return cls(tuple(prompt_ids), tuple(tuple(s) for s in seg.split(list(response_ids))))

    @classmethod
    def singletons(cls, prompt_ids: Sequence[int], response_ids: Sequence[int]) -> TrainingExample:
        return cls(tuple(prompt_ids), tuple((t,) for t in response_ids))


@dataclass(frozen=True)
class LossBreakdown:
    lm_loss: torch.Tensor
    stop_loss: torch.Tensor
    total: torch.Tensor
    lm_count: int
    stop_count: int


def stop_labels(lengths: Sequence[int], max_steps: int) -> tuple[list[list[int]], list[list[bool]]]:
    """Per rollout slot: 0 = continue, 1 = stop after this token; slots past the segment are masked."""
    labels, mask = [], []
    for n in lengths:
        if not 1 <= n <= max_steps:
            raise DataError(f"segment length {n} outside [1, {max_steps}]")
        labels.append([int(j == n - 1) for j in range(max_steps)])
        mask.append([j < n for j in range(max_steps)])
    return labels, mask


@dataclass
class Batch:
    row_ids: torch.Tensor  # (B, T, S) slot-padded ids of each base input row
    row_len: torch.Tensor  # (B, T) tokens fused into each row
    positions: torch.Tensor  # (B, T)
    valid: torch.Tensor  # (B, T)
    macro_index: torch.Tensor  # (R,) flat b*T+t of rows whose next segment is supervised
    seg_ids: torch.Tensor  # (R, S) target segment, PAD-padded
    seg_len: torch.Tensor  # (R,)

    @property
    def base_rows(self) -> int:
        return int(self.valid.sum())


def collate(examples: Sequence[TrainingExample], max_steps: int) -> Batch:
    """Base input rows are the prompt tokens one by one, then every response segment but the last, fused."""
    rows_per_ex, targets = [], []
    for ex in examples:
        if not ex.prompt_ids or not ex.response_segments:
            raise DataError("training example needs a prompt and at least one segment")
        for seg in ex.response_segments:
            if not 1 <= len(seg) <= max_steps:
                raise DataError(f"segment of length {len(seg)} exceeds max_steps {max_steps}")
        rows = [(t,) for t in ex.prompt_ids] + list(ex.response_segments[:-1])
        rows_per_ex.append(rows)
        targets.append(ex.response_segments)
    b, t = len(examples), max(len(r) for r in rows_per_ex)
    row_ids = torch.full((b, t, max_steps), PAD, dtype=torch.long)
    row_len = torch.ones(b, t, dtype=torch.long)
    positions = torch.zeros(b, t, dtype=torch.long)
    valid = torch.zeros(b, t, dtype=torch.bool)
    macro_index, seg_rows, seg_len = [], [], []
    for i, (rows, segs) in enumerate(zip(rows_per_ex, targets)):
        pos = -1
        for j, row in enumerate(rows):
            row_ids[i, j, : len(row)] = torch.tensor(row)
            row_len[i, j] = len(row)
            pos += len(row)
            positions[i, j] = pos
            valid[i, j] = True
        n_prompt = len(examples[i].prompt_ids)
        for g, seg in enumerate(segs):
            macro_index.append(i * t + n_prompt - 1 + g)
            seg_rows.append(list(seg) + [PAD] * (max_steps - len(seg)))
            seg_len.append(len(seg))
        # padding rows continue the position sequence so RoPE lookups stay in range
        positions[i, len(rows):] = pos
    return Batch(
        row_ids,
        row_len,
        positions,
        valid,
        torch.tensor(macro_index),
        torch.tensor(seg_rows, dtype=torch.long),
        torch.tensor(seg_len),
    )


@dataclass
class Rollout:
    logits: torch.Tensor  # (R, S, V)
    targets: torch.Tensor  # (R, S)
    lm_mask: torch.Tensor  # (R, S)
    token_mask: torch.Tensor  # (R, S) real response tokens only
    stop_logits: torch.Tensor | None  # (R, S)
    stop_targets: torch.Tensor | None
    stop_mask: torch.Tensor | None


def rollout(model: HamburgerModel, batch: Batch) -> Rollout:
    """Teacher-forced macro forward plus fully expanded micro rollout for every segment."""
    cfg = model.config
    base, dec = model.base, model.decoder
    s, d = cfg.max_steps, cfg.d_model
    b, t = batch.row_len.shape
    emb = base.embed_ids(batch.row_ids).view(b * t, s, d)
    x = model.embedder(emb, batch.row_len.view(-1)).view(b, t, d)
    taps, last = base.forward_embeddings(x, batch.positions, batch.valid)
    h1 = last.reshape(b * t, d)[batch.macro_index]
    hidden = h1.unsqueeze(1)
    if s > 1:
        ctx = dec.build_context({l: taps[l].reshape(b * t, d)[batch.macro_index] for l in cfg.tap_layers})
        prior = base.embed_ids(batch.seg_ids[:, : s - 1])
        micro = dec.run(ctx, prior)[:, dec.n_context :]
        hidden = torch.cat((hidden, micro), dim=1)
    logits = base.lm_head(hidden)

    slot = torch.arange(s)[None, :]
    token_mask = slot < batch.seg_len[:, None]
    targets = batch.seg_ids
    if cfg.stop_mode == "token":
        at_end = slot == batch.seg_len[:, None]
        targets = torch.where(at_end, torch.full_like(targets, STOP), targets)
        return Rollout(logits, targets, token_mask | at_end, token_mask, None, None, None)
    stop_logits = dec.stop_logit(hidden)
    stop_targets = (slot == batch.seg_len[:, None] - 1).to(hnn.DTYPE)
    return Rollout(logits, targets, token_mask, token_mask, stop_logits, stop_targets, token_mask)


def forward_teacher_forced(model: HamburgerModel, examples: Sequence[TrainingExample] | Batch, lam: float = 1.0) -> LossBreakdown:
    batch = examples if isinstance(examples, Batch) else collate(examples, model.config.max_steps)
    r = rollout(model, batch)
    v = r.logits.shape[-1]
    lm = hnn.cross_entropy(r.logits.reshape(-1, v), r.targets.reshape(-1), r.lm_mask.reshape(-1))
    if r.stop_logits is None:
        stop = lm.new_zeros(())
        stop_count = 0
    else:
        stop = hnn.binary_cross_entropy(r.stop_logits.reshape(-1), r.stop_targets.reshape(-1), r.stop_mask.reshape(-1))
        stop_count = int(r.stop_mask.sum())
    return LossBreakdown(lm, stop, lm + lam * stop, int(r.lm_mask.sum()), stop_count)


def sft_loss(base: BaseModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> torch.Tensor:
    """Standard next-token loss over response tokens, one base row per token."""
    seqs = [list(p) + list(r[:-1]) for p, r in pairs]
    b, t = len(seqs), max(len(s) for s in seqs)
    ids = torch.full((b, t), PAD, dtype=torch.long)
    targets = torch.full((b, t), PAD, dtype=torch.long)
    mask = torch.zeros(b, t, dtype=torch.bool)
    valid = torch.zeros(b, t, dtype=torch.bool)
    for i, (p, r) in enumerate(pairs):
        n = len(seqs[i])
        ids[i, :n] = torch.tensor(seqs[i])
        valid[i, :n] = True
        targets[i, len(p) - 1 : len(p) - 1 + len(r)] = torch.tensor(list(r))
        mask[i, len(p) - 1 : len(p) - 1 + len(r)] = True
    positions = torch.arange(t).expand(b, t)
    _, last = base.forward_embeddings(base.embed_ids(ids), positions, valid)
    logits = base.lm_head(last)
    return hnn.cross_entropy(logits.reshape(b * t, -1), targets.reshape(-1), mask.reshape(-1))


def cosine_lr(step: int, total_steps: int, peak: float, warmup: int = 0, floor_ratio: float = 0.1) -> float:
    """Linear warmup then cosine decay reaching floor_ratio·peak on the last step (index total_steps-1)."""
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    floor = floor_ratio * peak
    return floor + (peak - floor) * 0.5 * (1 + math.cos(math.pi * progress))


class Trainer:
    """AdamW over the base and grafted parameter groups with a shared cosine schedule.

    ``mode="sft"`` trains the base alone on the plain next-token objective
    (used to pretrain before adaptation); ``mode="hamburger"`` trains everything.
    """

    def __init__(
        self,
        model: HamburgerModel,
        lr_base: float,
        lr_grafted: float,
        total_steps: int,
        warmup: int = 0,
        weight_decay: float = 0.01,
        lam: float = 1.0,
        mode: str = "hamburger",
        grad_clip: float | None = 1.0,
        betas: tuple[float, float] = (0.9, 0.95),
    ):
        if mode not in ("hamburger", "sft"):
            raise ValueError(f"unknown training mode {mode!r}")
        self.model, self.mode, self.lam = model, mode, lam
        self.total_steps, self.warmup, self.grad_clip = total_steps, warmup, grad_clip
        self.peaks = {"base": lr_base, "grafted": lr_grafted}
        groups = model.parameter_groups()
        if mode == "sft":
            groups = {"base": groups["base"]}
        self.params = [p for g in groups.values() for _, p in g]
        self.opt = torch.optim.AdamW(
            [{"params": [p for _, p in ps], "lr": self.peaks[name], "name": name} for name, ps in groups.items()],
            betas=betas,
            weight_decay=weight_decay,
            foreach=False,
        )
        self.step_count = 0

    def rates(self, step: int | None = None) -> dict[str, float]:
        step = self.step_count if step is None else step
        return {name: cosine_lr(step, self.total_steps, peak, self.warmup) for name, peak in self.peaks.items()}

    def loss(self, examples: Sequence[TrainingExample]) -> LossBreakdown:
        if self.mode == "sft":
            lm = sft_loss(self.model.base, [(ex.prompt_ids, ex.response_ids) for ex in examples])
            n = sum(len(ex.response_ids) for ex in examples)
            return LossBreakdown(lm, lm.new_zeros(()), lm, n, 0)
        return forward_teacher_forced(self.model, examples, self.lam)

    def train_step(self, examples: Sequence[TrainingExample], accumulation: int = 1) -> dict:
        rates = self.rates()
        for group in self.opt.param_groups:
            group["lr"] = rates[group["name"]]
        self.model.train()
        self.opt.zero_grad(set_to_none=False)
        chunks = [examples[i::accumulation] for i in range(accumulation)]
        lm_total = stop_total = 0.0
        for chunk in chunks:
            parts = self.loss(chunk)
            if not torch.isfinite(parts.total):
                raise NumericError(
                    f"non-finite loss at step {self.step_count}: "
                    f"lm={parts.lm_loss.item()} stop={parts.stop_loss.item()}"
                )
            (parts.total / accumulation).backward()
            lm_total += parts.lm_loss.item() / accumulation
            stop_total += parts.stop_loss.item() / accumulation
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        grads = [p.grad for p in self.params]
        norm = float(torch.sqrt(sum(torch.sum(g * g) for g in grads)))
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {self.step_count}")
        if self.grad_clip is not None and norm > self.grad_clip:
            for g in grads:
                g.mul_(self.grad_clip / norm)
        self.opt.step()
        record = {
            "step": self.step_count,
            "lm_loss": lm_total,
            "stop_loss": stop_total,
            "lr_base": rates["base"],
            "lr_grafted": rates["grafted"] if self.mode == "hamburger" else 0.0,
            "grad_norm": norm,
        }
        self.step_count += 1
        return record


def batches(n: int, batch_size: int, steps: int, seed: int) -> Iterator[list[int]]:
    """Index batches over shuffled epochs; reshuffles each pass."""
    rng = random.Random(seed)
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            fresh = list(range(n))
            rng.shuffle(fresh)
            order.extend(fresh)
        yield order[:batch_size]
        del order[:batch_size]


@torch.no_grad()
def eval_token_accuracy(
    model: HamburgerModel, eval_set: Sequence[TrainingExample], batch_size: int = 64
) -> tuple[float, float | None]:
    """Teacher-forced greedy token accuracy, overall and excluding micro position 1."""
    correct = total = correct_rest = total_rest = 0
    for i in range(0, len(eval_set), batch_size):
        batch = collate(eval_set[i : i + batch_size], model.config.max_steps)
        r = rollout(model, batch)
        hit = (r.logits.argmax(-1) == r.targets) & r.token_mask
        rest = r.token_mask.clone()
        rest[:, 0] = False
        correct += int(hit.sum())
        total += int(r.token_mask.sum())
        correct_rest += int((hit & rest).sum())
        total_rest += int(rest.sum())
    overall = correct / total if total else float("nan")
    return overall, (correct_rest / total_rest if total_rest else None)
