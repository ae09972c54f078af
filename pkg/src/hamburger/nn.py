"""Dense float64 tensor ops the rest of the package composes.

Tensors and reverse-mode differentiation come from torch; this module pins
the dtype and wraps the handful of primitives the model needs with the
shape and mask checks the other modules rely on.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager

import torch

from .errors import (
    ConfigError,
    DimensionError,
    EmptyMaskWarning,
    MaskError,
    NumericError,
)

DTYPE = torch.float64
ROPE_BASE = 10000.0


def set_deterministic(seed: int | None = None) -> None:
    """Fix thread count and algorithm choice so reductions run in one order."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    torch.set_default_dtype(DTYPE)
    if seed is not None:
        torch.manual_seed(seed)


@contextmanager
def float64_default():
    """Create tensors as float64 inside the block, restoring the caller's default after."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(DTYPE)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


def attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean, broadcastable to (..., Tq, Tk); ``True`` marks a
    visible key. ``None`` means every key is visible. A query row with no
    visible key raises :class:`MaskError` instead of producing NaN.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise DimensionError(
            f"query head dim {queries.shape[-1]} != key head dim {keys.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    scores = queries @ keys.transpose(-1, -2) / math.sqrt(queries.shape[-1])
    if mask is not None:
        if mask.shape[-2:] != scores.shape[-2:]:
            raise DimensionError(
                f"mask {tuple(mask.shape[-2:])} does not match "
                f"(query-len, key-len) = {tuple(scores.shape[-2:])}"
            )
        if not bool(mask.any(-1).all()):
            raise MaskError("attention mask has a row with no visible key")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ values


def rope_angles(
    position_ids: Sequence[int] | torch.Tensor, head_dim: int, base: float = ROPE_BASE
) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (..., T, head_dim // 2) for the given positions."""
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {head_dim}")
    pos = torch.as_tensor(position_ids, dtype=DTYPE)
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=DTYPE) / head_dim)
    angles = pos.unsqueeze(-1) * inv_freq
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


def rope(
    x: torch.Tensor, position_ids: Sequence[int] | torch.Tensor, base: float = ROPE_BASE
) -> torch.Tensor:
    """Rotate (..., T, head_dim) by explicit per-row positions.

    Positions need not be contiguous: row ``i`` is rotated by
    ``position_ids[i]`` alone.
    """
    if x.shape[-1] % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {x.shape[-1]}")
    pos = torch.as_tensor(position_ids)
    if pos.shape[-1] != x.shape[-2]:
        raise DimensionError(f"{pos.shape[-1]} position ids for {x.shape[-2]} rows")
    cos, sin = rope_angles(pos, x.shape[-1], base)
    return apply_rope(x, cos, sin)


def rms_norm(x: torch.Tensor, weight: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    return torch.nn.functional.rms_norm(x, x.shape[-1:], weight, eps)


def _masked_mean(per_row: torch.Tensor, loss_mask: torch.Tensor, what: str) -> torch.Tensor:
    loss_mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    if loss_mask.shape != per_row.shape:
        raise DimensionError(f"{what}: mask shape {tuple(loss_mask.shape)} != {tuple(per_row.shape)}")
    count = int(loss_mask.sum())
    if count == 0:
        warnings.warn(f"{what}: every row is masked out, loss defined as 0", EmptyMaskWarning)
        return per_row.sum() * 0.0
    return torch.where(loss_mask, per_row, torch.zeros_like(per_row)).sum() / count


def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean negative log-likelihood over rows whose mask bit is set.

    ``logits`` is (N, V); ``targets`` (N,) token ids. Masked-out rows may
    hold any target id, including out-of-range padding.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(
            f"cross_entropy wants (N, V) logits and (N,) targets, got "
            f"{tuple(logits.shape)} and {tuple(targets.shape)}"
        )
    if loss_mask is None:
        loss_mask = torch.ones_like(targets, dtype=torch.bool)
    loss_mask = torch.as_tensor(loss_mask, dtype=torch.bool)
    safe = torch.where(loss_mask, targets, torch.zeros_like(targets))
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return _masked_mean(nll, loss_mask, "cross_entropy")


def binary_cross_entropy(
    stop_logits: torch.Tensor, labels: torch.Tensor, loss_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Sigmoid cross-entropy, averaged like :func:`cross_entropy`."""
    labels = torch.as_tensor(labels, dtype=stop_logits.dtype)
    if labels.shape != stop_logits.shape:
        raise DimensionError(f"labels {tuple(labels.shape)} vs logits {tuple(stop_logits.shape)}")
    if loss_mask is None:
        loss_mask = torch.ones_like(labels, dtype=torch.bool)
    # softplus(z) - y*z is the stable form of -[y log s(z) + (1-y) log(1-s(z))]
    per = torch.nn.functional.softplus(stop_logits) - labels * stop_logits
    return _masked_mean(per, loss_mask, "binary_cross_entropy")


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    epsilon: float = 1e-5,
    samples_per_param: int = 8,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    Coordinates are sampled per parameter tensor with a fixed generator.
    Error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            n = min(samples_per_param, flat.numel())
            idx = torch.randperm(flat.numel(), generator=gen)[:n]
            for i in idx.tolist():
                analytic = 0.0 if g is None else float(g.reshape(-1)[i])
                orig = float(flat[i])
                flat[i] = orig + epsilon
                up = loss_fn()
                flat[i] = orig - epsilon
                down = loss_fn()
                flat[i] = orig
                if not (torch.isfinite(up) and torch.isfinite(down)):
                    raise NumericError("non-finite loss while perturbing a parameter")
                numeric = (float(up) - float(down)) / (2 * epsilon)
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
