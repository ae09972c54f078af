import math

import pytest
import torch
from conftest import jitter, tiny_config

from hamburger.config import STOP
from hamburger.data import wrap
from hamburger.errors import DataError
from hamburger.hamburger import build_model
from hamburger.trainer import (
    Trainer,
    TrainingExample,
    batches,
    collate,
    cosine_lr,
    eval_token_accuracy,
    forward_teacher_forced,
    sft_loss,
    stop_labels,
)

PAIRS = [wrap("ab", "hello!"), wrap("xyz", "q"), wrap("k", "mississippi")]


def segmented(p, r, lengths):
    segs, i = [], 0
    for n in lengths:
        segs.append(tuple(r[i : i + n]))
        i += n
    assert i == len(r)
    return TrainingExample(tuple(p), tuple(segs))


class TestStopLabels:
    def test_singleton(self):
        labels, mask = stop_labels([1], 4)
        assert labels[0][:1] == [1] and mask[0] == [True, False, False, False]

    def test_partial(self):
        labels, mask = stop_labels([3], 4)
        assert [l if m else "masked" for l, m in zip(labels[0], mask[0])] == [0, 0, 1, "masked"]

    def test_full(self):
        labels, mask = stop_labels([4], 4)
        assert labels[0] == [0, 0, 0, 1] and all(mask[0])

    def test_too_long(self):
        with pytest.raises(DataError):
            stop_labels([5], 4)


class TestTeacherForced:
    def test_singletons_match_sft(self, tiny):
        examples = [TrainingExample.singletons(p, r) for p, r in PAIRS]
        ham = forward_teacher_forced(tiny, examples, lam=0.0)
        ref = sft_loss(tiny.base, PAIRS)
        assert abs(ham.lm_loss.item() - ref.item()) < 1e-8
        assert ham.total.item() == ham.lm_loss.item()

    def test_base_rows_shrink_with_fusion(self, tiny):
        p, r = PAIRS[0]
        ex = segmented(p, r, [3, 1, 2, 1])
        batch = collate([ex], tiny.config.max_steps)
        assert batch.base_rows == len(p) + len(ex.response_segments) - 1
        assert batch.base_rows < len(p) + len(r)
        assert batch.positions[0, : batch.base_rows].tolist() == [0, 1, 2, 3, 6, 7, 9]

    def test_mask_counts(self, tiny):
        p, r = wrap("a", "abcd")  # response is 5 tokens with EOS
        ex = segmented(p, r, [3, 2])
        parts = forward_teacher_forced(tiny, [ex])
        assert parts.lm_count == len(r)
        assert parts.stop_count == len(r)

    def test_stop_token_mode_targets(self):
        m = jitter(build_model(tiny_config(stop_mode="token")))
        p, r = wrap("a", "abcd")
        ex = segmented(p, r, [3, 2])
        parts = forward_teacher_forced(m, [ex])
        # one extra STOP target per segment that is shorter than max_steps
        assert parts.lm_count == len(r) + 2
        assert parts.stop_count == 0
        from hamburger.trainer import rollout

        roll = rollout(m, collate([ex], 4))
        assert roll.targets[0, 3].item() == STOP and roll.lm_mask[0, 3]

    def test_prompt_positions_never_supervised(self, tiny):
        p, r = PAIRS[1]
        ex = TrainingExample.singletons(p, r)
        base_loss = forward_teacher_forced(tiny, [ex]).lm_loss
        changed = TrainingExample(tuple(p[:1]) + (ord("Z"),) + tuple(p[2:]), ex.response_segments)
        # prompt tokens only shape context; response count (and mask) is unchanged
        assert forward_teacher_forced(tiny, [changed]).lm_count == forward_teacher_forced(tiny, [ex]).lm_count
        assert torch.isfinite(base_loss)

    def test_bad_segment(self, tiny):
        p, r = PAIRS[2]
        with pytest.raises(DataError):
            forward_teacher_forced(tiny, [segmented(p, r, [5, len(r) - 5])])

    def test_grad_check_combined(self, tiny):
        from hamburger import nn as hnn

        p, r = PAIRS[0]
        ex = [segmented(p, r, [3, 1, 2, 1])]
        err = hnn.grad_check(lambda: forward_teacher_forced(tiny, ex).total, tiny.parameters(), samples_per_param=3)
        assert err < 1e-4


class TestSchedule:
    def test_final_step_floor(self):
        assert cosine_lr(99, 100, 1e-3, warmup=10) == pytest.approx(1e-4, rel=1e-12)
        assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)

    def test_warmup_linear(self):
        assert cosine_lr(4, 100, 1.0, warmup=10) == pytest.approx(0.5)

    def test_monotone_after_warmup(self):
        rates = [cosine_lr(s, 50, 1.0, warmup=5) for s in range(5, 50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestTrainStep:
    def test_loss_decreases(self):
        m = build_model(tiny_config(), seed=3)
        exs = [segmented(p, r, [1] * len(r)) for p, r in PAIRS]
        tr = Trainer(m, 1e-3, 1e-3, total_steps=100)
        first = forward_teacher_forced(m, exs).total.item()
        for _ in range(3):
            tr.train_step(exs)
        assert forward_teacher_forced(m, exs).total.item() < first

    def test_record_fields(self, tiny):
        tr = Trainer(tiny, 5e-5, 1e-4, total_steps=10)
        rec = tr.train_step([TrainingExample.singletons(*PAIRS[0])])
        assert set(rec) == {"step", "lm_loss", "stop_loss", "lr_base", "lr_grafted", "grad_norm"}
        assert rec["lr_base"] == 5e-5 and rec["lr_grafted"] == 1e-4

    def test_zero_grad_param_still_decays(self, tiny):
        tr = Trainer(tiny, 1e-2, 1e-2, total_steps=10, weight_decay=0.1)
        # PAD is never an input or target here, so its embedding row has zero gradient
        row = tiny.base.tok_emb.weight[256].detach().clone()
        tr.train_step([TrainingExample.singletons(*PAIRS[0])])
        after = tiny.base.tok_emb.weight[256].detach()
        torch.testing.assert_close(after, row * (1 - 1e-2 * 0.1), rtol=0, atol=1e-15)

    def test_lambda_zero_singletons_track_sft(self):
        a = build_model(tiny_config(), seed=5)
        b = build_model(tiny_config(), seed=5)
        exs = [TrainingExample.singletons(p, r) for p, r in PAIRS]
        ham = Trainer(a, 1e-3, 1e-3, total_steps=10, lam=0.0)
        sft = Trainer(b, 1e-3, 1e-3, total_steps=10, mode="sft")
        for _ in range(3):
            ra, rb = ham.train_step(exs), sft.train_step(exs)
            assert ra["lm_loss"] == pytest.approx(rb["lm_loss"], abs=1e-8)
        for (n, pa), (_, pb) in zip(a.base.named_parameters(), b.base.named_parameters()):
            torch.testing.assert_close(pa, pb, rtol=0, atol=1e-10, msg=n)

    def test_accumulation_matches_full_batch(self):
        a = build_model(tiny_config(), seed=2)
        b = build_model(tiny_config(), seed=2)
        e0, e1 = (TrainingExample.singletons(p, r) for p, r in PAIRS[:2])
        # strided chunks are [e0, e1] twice, so chunk means equal the full mean
        exs = [e0, e0, e1, e1]
        ra = Trainer(a, 1e-3, 1e-3, 10).train_step(exs)
        rb = Trainer(b, 1e-3, 1e-3, 10).train_step(exs, accumulation=2)
        assert ra["lm_loss"] == pytest.approx(rb["lm_loss"], abs=1e-12)
        for pa, pb in zip(a.parameters(), b.parameters()):
            torch.testing.assert_close(pa.grad, pb.grad, rtol=0, atol=1e-12)

    def test_non_finite_loss_aborts(self, tiny):
        from hamburger.errors import NumericError

        with torch.no_grad():
            tiny.base.head.weight[0, 0] = float("nan")
        with pytest.raises(NumericError):
            Trainer(tiny, 1e-3, 1e-3, 10).train_step([TrainingExample.singletons(*PAIRS[0])])


class TestBatches:
    def test_epoch_coverage_and_determinism(self):
        got = list(batches(10, 5, 4, seed=1))
        assert sorted(got[0] + got[1]) == list(range(10))
        assert got == list(batches(10, 5, 4, seed=1))


class TestAccuracy:
    def test_perfect_model(self, tiny, monkeypatch):
        import hamburger.trainer as T

        real = T.rollout

        def oracle(model, batch):
            r = real(model, batch)
            logits = torch.full_like(r.logits, -1.0)
            logits.scatter_(-1, r.targets.clamp(max=r.logits.shape[-1] - 1).unsqueeze(-1), 1.0)
            return T.Rollout(logits, r.targets, r.lm_mask, r.token_mask, r.stop_logits, r.stop_targets, r.stop_mask)

        monkeypatch.setattr(T, "rollout", oracle)
        p, r = PAIRS[0]
        assert eval_token_accuracy(tiny, [segmented(p, r, [3, 1, 2, 1])]) == (1.0, 1.0)

    def test_singletons_have_no_beyond_first(self, tiny):
        overall, rest = eval_token_accuracy(tiny, [TrainingExample.singletons(*PAIRS[0])])
        assert 0.0 <= overall <= 1.0
        assert rest is None

    def test_chance_level(self):
        gen = torch.Generator().manual_seed(0)
        m = build_model(tiny_config(), seed=11)
        exs = []
        for _ in range(160):
            resp = torch.randint(0, 256, (64,), generator=gen).tolist()
            exs.append(segmented([257, 259], resp, [4] * 16))
        overall, rest = eval_token_accuracy(m, exs)
        n = 160 * 64
        sd = math.sqrt((1 / 260) * (1 - 1 / 260) / n)
        assert n >= 10_000
        assert abs(overall - 1 / 260) < 5 * sd + 1 / 256 - 1 / 260
