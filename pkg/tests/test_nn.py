import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hamburger import nn as hnn
from hamburger.errors import (
    ConfigError,
    DimensionError,
    EmptyMaskWarning,
    MaskError,
    NumericError,
)


def loop_attention(q, k, v, mask):
    out = torch.zeros(q.shape[0], v.shape[1])
    for i in range(q.shape[0]):
        scores = []
        for j in range(k.shape[0]):
            s = sum(float(q[i, d]) * float(k[j, d]) for d in range(q.shape[1])) / math.sqrt(q.shape[1])
            scores.append(s if mask[i][j] else None)
        top = max(s for s in scores if s is not None)
        w = [math.exp(s - top) if s is not None else 0.0 for s in scores]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j]
    return out


class TestAttention:
    def test_single_key_returns_value(self):
        x = torch.randn(1, 4)
        torch.testing.assert_close(hnn.attention(x, x, x, torch.ones(1, 1, dtype=torch.bool)), x)

    def test_masked_key_gets_zero_weight(self):
        q = torch.randn(1, 4)
        k = torch.randn(2, 4)
        v = torch.randn(2, 4)
        mask = torch.tensor([[True, False]])
        out = hnn.attention(q, k, v, mask)
        v2 = v.clone()
        v2[1] = 1e6
        assert torch.equal(out, v[:1])
        assert torch.equal(hnn.attention(q, k, v2, mask), out)

    def test_matches_loop_reference(self):
        q, k, v = torch.randn(2, 4), torch.randn(2, 4), torch.randn(2, 4)
        mask = torch.ones(2, 2, dtype=torch.bool)
        torch.testing.assert_close(hnn.attention(q, k, v, mask), loop_attention(q, k, v, mask), rtol=0, atol=1e-12)

    def test_causal_loop_reference(self):
        q, k, v = torch.randn(5, 6), torch.randn(5, 6), torch.randn(5, 3)
        mask = torch.ones(5, 5, dtype=torch.bool).tril()
        torch.testing.assert_close(hnn.attention(q, k, v, mask), loop_attention(q, k, v, mask), rtol=0, atol=1e-12)

    def test_head_dim_mismatch(self):
        with pytest.raises(DimensionError, match="4.*3"):
            hnn.attention(torch.randn(2, 4), torch.randn(2, 3), torch.randn(2, 4))

    def test_mask_shape_mismatch(self):
        with pytest.raises(DimensionError):
            hnn.attention(torch.randn(2, 4), torch.randn(3, 4), torch.randn(3, 4), torch.ones(2, 2, dtype=torch.bool))

    def test_all_false_row_is_rejected(self):
        mask = torch.tensor([[True, False], [False, False]])
        with pytest.raises(MaskError):
            hnn.attention(torch.randn(2, 4), torch.randn(2, 4), torch.randn(2, 4), mask)

    def test_deterministic(self):
        q, k, v = torch.randn(3, 8, 4), torch.randn(3, 8, 4), torch.randn(3, 8, 4)
        assert torch.equal(hnn.attention(q, k, v), hnn.attention(q, k, v))


class TestRope:
    def test_zero_positions_identity(self):
        x = torch.randn(3, 8)
        assert torch.equal(hnn.rope(x, [0, 0, 0]), x)

    def test_preserves_norm(self):
        x = torch.randn(2, 5, 16)
        y = hnn.rope(x, [0, 3, 7, 100, 2047])
        torch.testing.assert_close(y.norm(dim=-1), x.norm(dim=-1), rtol=0, atol=1e-12)

    def test_rows_independent(self):
        x = torch.randn(2, 8)
        both = hnn.rope(x, [0, 5])
        torch.testing.assert_close(both[0], hnn.rope(x[:1], [0])[0], rtol=0, atol=0)
        torch.testing.assert_close(both[1], hnn.rope(x[1:], [5])[0], rtol=0, atol=0)

    def test_odd_head_dim(self):
        with pytest.raises(ConfigError):
            hnn.rope(torch.randn(2, 5), [0, 1])

    def test_relative_property(self):
        # <rope(q, m), rope(k, n)> depends only on m - n
        q, k = torch.randn(1, 8), torch.randn(1, 8)
        a = (hnn.rope(q, [7]) * hnn.rope(k, [3])).sum()
        b = (hnn.rope(q, [104]) * hnn.rope(k, [100])).sum()
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 5000), min_size=1, max_size=6))
    def test_history_free(self, ids):
        x = torch.arange(len(ids) * 4, dtype=torch.float64).reshape(len(ids), 4)
        once = hnn.rope(x, ids)
        hnn.rope(x, list(reversed(ids)))
        assert torch.equal(once, hnn.rope(x, ids))


class TestRmsNorm:
    def test_matches_loop_formula(self):
        x, w = torch.randn(3, 8), torch.randn(8)
        want = torch.stack([row / math.sqrt(float((row**2).mean()) + 1e-6) * w for row in x])
        torch.testing.assert_close(hnn.rms_norm(x, w), want, rtol=1e-12, atol=1e-12)

    def test_scale_invariant(self):
        x = torch.randn(5, 16)
        torch.testing.assert_close(hnn.rms_norm(1e3 * x), hnn.rms_norm(x), rtol=1e-5, atol=1e-5)  # eps breaks exact invariance


class TestLosses:
    def test_uniform_logits(self):
        loss = hnn.cross_entropy(torch.zeros(3, 260), torch.tensor([0, 17, 259]))
        assert loss.item() == pytest.approx(math.log(260), abs=1e-12)

    def test_margin_limit(self):
        logits = torch.zeros(1, 10)
        logits[0, 3] = 50.0
        assert hnn.cross_entropy(logits, torch.tensor([3])).item() < 1e-20

    def test_masked_row_excluded(self):
        logits = torch.randn(3, 7)
        targets = torch.tensor([1, 2, 3])
        loss = hnn.cross_entropy(logits, targets, torch.tensor([True, False, True]))
        per = [-(logits[i, targets[i]] - torch.logsumexp(logits[i], 0)) for i in (0, 2)]
        torch.testing.assert_close(loss, (per[0] + per[1]) / 2, rtol=0, atol=1e-12)

    def test_masked_rows_accept_any_target(self):
        loss = hnn.cross_entropy(torch.randn(2, 4), torch.tensor([1, -100]), torch.tensor([True, False]))
        assert torch.isfinite(loss)

    def test_all_masked_warns_zero(self):
        with pytest.warns(EmptyMaskWarning):
            loss = hnn.cross_entropy(torch.randn(2, 4), torch.tensor([0, 1]), torch.tensor([False, False]))
        assert loss.item() == 0.0

    def test_bce_examples(self):
        assert hnn.binary_cross_entropy(torch.tensor([0.0]), torch.tensor([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
        assert hnn.binary_cross_entropy(torch.tensor([20.0]), torch.tensor([1.0])).item() < 3e-9

    def test_bce_per_element_reference(self):
        z = torch.randn(9) * 3
        y = torch.randint(0, 2, (9,)).double()
        mask = torch.tensor([1, 1, 0, 1, 0, 1, 1, 1, 0], dtype=torch.bool)
        ref = []
        for zi, yi, mi in zip(z.tolist(), y.tolist(), mask.tolist()):
            if mi:
                s = 1 / (1 + math.exp(-zi))
                ref.append(-(yi * math.log(s) + (1 - yi) * math.log(1 - s)))
        got = hnn.binary_cross_entropy(z, y, mask).item()
        assert got == pytest.approx(sum(ref) / len(ref), abs=1e-12)

    def test_bce_all_masked(self):
        with pytest.warns(EmptyMaskWarning):
            assert hnn.binary_cross_entropy(torch.randn(3), torch.ones(3), torch.zeros(3, dtype=torch.bool)).item() == 0.0


class TestGradCheck:
    def test_quadratic(self):
        w = torch.tensor([3.0], requires_grad=True)
        assert hnn.grad_check(lambda: (w**2).sum(), [w]) < 1e-9

    def test_detects_wrong_gradient(self):
        w = torch.tensor([3.0], requires_grad=True)

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x**2

            @staticmethod
            def backward(ctx, g):
                return g  # should be 2x

        assert hnn.grad_check(lambda: Wrong.apply(w).sum(), [w]) > 0.5

    def test_epsilon_range(self):
        w = torch.tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            hnn.grad_check(lambda: w.sum(), [w], epsilon=1e-2)

    def test_non_finite(self):
        w = torch.tensor([0.0], requires_grad=True)
        with pytest.raises(NumericError):
            hnn.grad_check(lambda: (1 / w).sum(), [w])
