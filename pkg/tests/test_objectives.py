"""Loss values against closed-form and direct-summation oracles."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from advfuse.adversary import PerturbationState
from advfuse.autodiff import Tape, Tensor, backward
from advfuse.errors import ContractError, NumericDomainError
from advfuse.model import CLS_ID, ModelConfig, ModelParams, MultimodalBatch, forward
from advfuse.objectives import (
    LossBreakdown,
    adversarial_branch_loss,
    cross_entropy,
    masked_lm_loss,
    sym_kl,
    task_loss,
)


def direct_sym_kl(p, q):
    """Direct per-class summation, the independent oracle for sym_kl."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    kl_pq = sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)
    kl_qp = sum(qi * (math.log(qi) - math.log(pi)) for pi, qi in zip(p, q) if qi > 0)
    return kl_pq + kl_qp


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
        assert abs(float(loss.values) - math.log(4)) < 1e-12

    def test_three_quarters_case(self):
        loss = cross_entropy(np.array([[0.0, math.log(3.0)]]), np.array([1]))
        assert abs(float(loss.values) + math.log(0.75)) < 1e-12

    def test_saturated_true_class(self):
        loss = cross_entropy(np.array([[30.0, 0.0, 0.0]]), np.array([0]))
        assert float(loss.values) < 1e-12

    def test_ignore_index(self):
        logits = np.array([[0.0, math.log(3.0)], [100.0, 0.0]])
        loss = cross_entropy(logits, np.array([1, -1]), ignore_index=-1)
        assert abs(float(loss.values) + math.log(0.75)) < 1e-12

    def test_all_ignored_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros((2, 3)), np.array([-1, -1]), ignore_index=-1)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ContractError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(1, 6)), requires_grad=True)
        label = np.array([2])
        with Tape() as tape:
            loss = cross_entropy(logits, label)
        grads = backward(tape, loss)
        z = logits.values - logits.values.max(axis=-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        onehot = np.zeros((1, 6))
        onehot[0, 2] = 1.0
        npt.assert_allclose(grads[logits.node_id], p - onehot, atol=1e-10)

    def test_gradient_mean_scaling_over_rows(self):
        rng = np.random.default_rng(1)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 1, 2, 1])
        with Tape() as tape:
            loss = cross_entropy(logits, labels)
        grads = backward(tape, loss)
        z = logits.values - logits.values.max(axis=-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), labels] = 1.0
        npt.assert_allclose(grads[logits.node_id], (p - onehot) / 4.0, atol=1e-10)


class TestMaskedLmLoss:
    def test_single_masked_uniform(self):
        logits = np.zeros((1, 3, 64))
        targets = np.full((1, 3), -1)
        targets[0, 1] = 7
        loss = masked_lm_loss(logits, targets)
        assert abs(float(loss.values) - math.log(64)) < 1e-12

    def test_no_masked_positions_rejected(self):
        with pytest.raises(ContractError):
            masked_lm_loss(np.zeros((1, 3, 8)), np.full((1, 3), -1))

    def test_mean_of_two_positions(self):
        logits = np.zeros((1, 2, 4))
        logits[0, 0] = [5.0, 0.0, 0.0, 0.0]
        logits[0, 1] = [0.0, 0.0, 0.0, 0.0]
        targets = np.array([[0, 2]])
        a = cross_entropy(logits[0, :1], np.array([0]))
        b = cross_entropy(logits[0, 1:], np.array([2]))
        loss = masked_lm_loss(logits, targets)
        expect = (float(a.values) + float(b.values)) / 2.0
        assert abs(float(loss.values) - expect) < 1e-12


class TestSymKl:
    def test_identical_logits_give_zero(self):
        logits = np.random.default_rng(2).normal(size=(3, 5))
        assert float(sym_kl(logits, logits.copy()).values) == 0.0

    def test_frozen_oracle_value(self):
        p_logits = np.array([[0.0, 0.0]])
        q_logits = np.log([[0.9, 0.1]])
        got = float(sym_kl(p_logits, q_logits).values)
        assert abs(got - 0.8788898) < 1e-6
        assert abs(got - direct_sym_kl([0.5, 0.5], [0.9, 0.1])) < 1e-12

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.normal(scale=3.0, size=(4, 6))
            q = rng.normal(scale=3.0, size=(4, 6))
            ab = float(sym_kl(p, q).values)
            ba = float(sym_kl(q, p).values)
            assert abs(ab - ba) < 1e-12
            assert ab >= 0.0

    def test_zero_iff_same_distribution(self):
        # shifting all logits by a constant leaves the distribution unchanged
        p = np.array([[1.0, 2.0, 3.0]])
        assert abs(float(sym_kl(p, p + 10.0).values)) < 1e-10
        assert float(sym_kl(p, p * 2.0).values) > 1e-3

    def test_batch_mean(self):
        p = np.array([[0.0, 0.0], [0.0, 0.0]])
        q = np.vstack([np.log([[0.9, 0.1]]), np.log([[0.5, 0.5]])])
        got = float(sym_kl(p, q).values)
        expect = (direct_sym_kl([0.5, 0.5], [0.9, 0.1]) + 0.0) / 2.0
        assert abs(got - expect) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            sym_kl(np.zeros((1, 2)), np.zeros((1, 3)))

    def test_saturated_logits_stay_finite(self):
        p = np.array([[800.0, 0.0, -800.0]])
        q = np.array([[-800.0, 0.0, 800.0]])
        v = float(sym_kl(p, q).values)
        assert np.isfinite(v) and v > 0.0


class TestLossBreakdown:
    def test_compose(self):
        br = LossBreakdown.build(1.0, 2.0, 0.5, kl_weight=2.0)
        assert br.total == 1.0 + 2.0 + 2.0 * 0.5
        assert abs(br.total - (br.l_std + br.r_at + 2.0 * br.r_kl)) < 1e-12

    def test_standard_mode_zeroes_adversarial_terms(self):
        br = LossBreakdown.standard(0.75)
        assert br.r_at == 0.0 and br.r_kl == 0.0 and br.total == 0.75

    def test_rejects_nonfinite(self):
        with pytest.raises(NumericDomainError):
            LossBreakdown.build(float("nan"), 0.0, 0.0, 1.0)

    def test_rejects_negative(self):
        with pytest.raises(ContractError):
            LossBreakdown.build(-0.1, 0.0, 0.0, 1.0)


def branch_fixture(seed=0, task="answer"):
    cfg = ModelConfig(num_layers=1, hidden=8, num_heads=2, vocab_size=10,
                      max_tokens=5, max_regions=3, region_feat_dim=4)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, rng)
    b = 2
    tokens = rng.integers(3, cfg.vocab_size, size=(b, cfg.max_tokens))
    tokens[:, 0] = CLS_ID
    feats = rng.normal(size=(b, cfg.max_regions, cfg.region_feat_dim))
    batch = MultimodalBatch(
        img_feats=feats,
        region_boxes=rng.uniform(size=(b, cfg.max_regions, 4)),
        txt_tokens=tokens,
        txt_mask=np.ones((b, cfg.max_tokens)),
        region_mask=np.ones((b, cfg.max_regions)),
    )
    if task == "answer":
        batch.answer_label = rng.integers(0, cfg.num_answers, size=b)
    elif task == "itm":
        batch.itm_label = rng.integers(0, 2, size=b)
    batch.validate(cfg)
    return cfg, params, batch, rng


class TestAdversarialBranchLoss:
    def test_zero_delta_matches_clean_loss(self):
        cfg, params, batch, rng = branch_fixture(4)
        state = PerturbationState.fresh(batch, cfg.hidden, 0.0, 0.1, "both", rng)
        with Tape() as tape:
            clean = forward(params, batch, task="answer")
            l_std = task_loss(clean, batch)
            r_at = 0.0
            r_kl = 0.0
            for modality in ("txt", "img"):
                br, _ = adversarial_branch_loss(
                    params, batch, state, "answer", modality,
                    clean.task_logits, kl_weight=1.5,
                )
                r_at += float(br.ce.values)
                r_kl += float(br.kl.values)
        assert abs(r_at - 2.0 * float(l_std.values)) < 1e-12
        assert abs(r_kl) < 1e-12

    def test_kl_weight_zero_skips_kl(self):
        cfg, params, batch, rng = branch_fixture(5)
        state = PerturbationState.fresh(batch, cfg.hidden, 0.3, 0.1, "txt", rng)
        with Tape():
            clean = forward(params, batch, task="answer")
            br, _ = adversarial_branch_loss(
                params, batch, state, "answer", "txt", clean.task_logits, kl_weight=0.0,
            )
        assert br.kl is None
        assert br.theta is br.ce and br.ascent is br.ce

    def test_kl_weight_scales_theta_linearly(self):
        cfg, params, batch, rng = branch_fixture(6)
        state = PerturbationState.fresh(batch, cfg.hidden, 0.5, 0.1, "txt", rng)
        thetas = {}
        for w in (1.0, 2.0):
            with Tape():
                clean = forward(params, batch, task="answer")
                br, _ = adversarial_branch_loss(
                    params, batch, state, "answer", "txt", clean.task_logits, kl_weight=w,
                )
            thetas[w] = (float(br.theta.values), float(br.ce.values), float(br.kl.values))
        t1, ce1, kl1 = thetas[1.0]
        t2, ce2, kl2 = thetas[2.0]
        assert ce1 == ce2 and kl1 == kl2
        assert abs((t2 - ce2) - 2.0 * (t1 - ce1)) < 1e-12

    def test_disabled_modality_rejected(self):
        cfg, params, batch, rng = branch_fixture(7)
        state = PerturbationState.fresh(batch, cfg.hidden, 0.3, 0.1, "txt", rng)
        with pytest.raises(ContractError):
            with Tape():
                clean = forward(params, batch, task="answer")
                adversarial_branch_loss(
                    params, batch, state, "answer", "img", clean.task_logits, kl_weight=1.0,
                )

    def test_stop_target_blocks_gradient_flow(self):
        cfg, params, batch, rng = branch_fixture(8)
        state = PerturbationState.fresh(batch, cfg.hidden, 0.4, 0.1, "txt", rng)
        grads = {}
        for mode in ("stop", "flow"):
            with Tape() as tape:
                clean = forward(params, batch, task="answer")
                br, _ = adversarial_branch_loss(
                    params, batch, state, "answer", "txt",
                    clean.task_logits, kl_weight=1.0, kl_target_grad=mode,
                )
                kl = br.kl
            grads[mode] = backward(tape, kl)[params["answer_head_w"].node_id]
        # with the target frozen only the perturbed branch reaches the head;
        # letting gradient flow through the target must change the gradient
        assert not np.allclose(grads["stop"], grads["flow"])

    def test_task_loss_requires_labels(self):
        cfg, params, batch, rng = branch_fixture(9, task="none")
        out = forward(params, batch, task="answer")
        with pytest.raises(ContractError):
            task_loss(out, batch)
