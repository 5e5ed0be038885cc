"""Softmax-family objectives: values, gradients, reductions, adjustments."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedss.errors import ContractViolationError
from fedss.losses import (
    SampledLogitContext,
    adjust_logits,
    fedss_loss,
    fedss_loss_rewritten,
    full_softmax_loss,
    logit_adjustments,
    minibatch_loss_and_grad,
    negonly_loss,
    objective_for_method,
    posonly_loss,
    sampled_softmax_loss,
    softmax_probs,
)
from fedss.model import cosine_logits, forward_features, init_model, ModelConfig
from fedss.federation import init_rng
from fedss.losses import loss_backward_to_params
from fedss.numerics import gradient_check

logits_st = arrays(np.float64, 6, elements=st.floats(min_value=-30, max_value=30))


def make_ctx(n_pos=2, n_neg=4, pool=100, target=0):
    """Context over labels [0..n_pos+n_neg) with leading positives."""
    size = n_pos + n_neg
    mask = np.zeros(size, dtype=bool)
    mask[:n_pos] = True
    return SampledLogitContext.uniform(
        labels=np.arange(size), target=target, positive_mask=mask, pool_size=pool
    )


# --- softmax_probs ----------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_probs([0.0] * 4), [0.25] * 4, atol=1e-12)


def test_softmax_two_to_one():
    np.testing.assert_allclose(
        softmax_probs([np.log(2.0), 0.0]), [2.0 / 3.0, 1.0 / 3.0], atol=1e-12
    )


def test_softmax_saturated_no_overflow():
    with np.errstate(over="raise"):
        p = softmax_probs([1000.0, 0.0])
    np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-12)


@given(logits_st)
def test_softmax_sums_to_one(o):
    p = softmax_probs(o)
    assert np.all(p > 0)
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-12)


# --- full_softmax_loss --------------------------------------------------------


def test_full_softmax_uniform_is_log_n():
    out = full_softmax_loss(np.zeros(10), 3)
    assert out.value == pytest.approx(np.log(10.0), abs=1e-12)


def test_full_softmax_saturated_target():
    o = np.zeros(3)
    o[1] = 50.0
    assert full_softmax_loss(o, 1).value < 1e-20


def test_full_softmax_direct_value():
    out = full_softmax_loss(np.array([2.0, 1.0, 0.0]), 0)
    assert out.value == pytest.approx(0.407605964, abs=1e-9)


def test_full_softmax_gradient_is_probs_minus_onehot():
    o = np.array([0.5, -1.0, 2.0])
    out = full_softmax_loss(o, 2)
    want = softmax_probs(o)
    want[2] -= 1.0
    np.testing.assert_allclose(out.grad_logits, want, atol=1e-12)


def test_full_softmax_target_out_of_range():
    with pytest.raises(ContractViolationError):
        full_softmax_loss(np.zeros(3), 3)


# --- adjustments ---------------------------------------------------------------


def test_adjustment_uniform_pool_shift():
    ctx = make_ctx(n_pos=1, n_neg=10, pool=100)
    adj = logit_adjustments(ctx)
    np.testing.assert_allclose(adj[1:], np.log(0.1), atol=1e-12)
    assert adj[0] == 0.0
    shifted = adjust_logits(np.zeros(11), ctx)
    np.testing.assert_allclose(shifted[1:], 2.302585093, atol=1e-9)


def test_adjustment_full_pool_vanishes():
    ctx = make_ctx(n_pos=1, n_neg=25, pool=25)
    np.testing.assert_array_equal(logit_adjustments(ctx), np.zeros(26))


def test_adjustment_leaves_positives_alone(rng):
    ctx = make_ctx(n_pos=3, n_neg=5, pool=40)
    o = rng.normal(size=8)
    np.testing.assert_array_equal(adjust_logits(o, ctx)[:3], o[:3])


def test_context_rejects_nonpositive_proposal():
    with pytest.raises(ContractViolationError):
        SampledLogitContext(
            labels=np.arange(3),
            target=0,
            positive_mask=np.array([True, False, False]),
            proposal_q=np.array([1.0, 0.0, 0.5]),
        )


def test_context_rejects_negative_target():
    with pytest.raises(ContractViolationError):
        make_ctx(n_pos=1, n_neg=3, target=2)


# --- sampled softmax ------------------------------------------------------------


def test_sampled_softmax_no_negatives_is_zero():
    ctx = make_ctx(n_pos=1, n_neg=0)
    assert sampled_softmax_loss(np.array([3.0]), ctx).value == 0.0


def test_sampled_softmax_full_pool_equals_full_softmax(rng):
    n = 12
    o = rng.normal(size=n)
    mask = np.zeros(n, dtype=bool)
    mask[4] = True
    ctx = SampledLogitContext.uniform(
        labels=np.arange(n), target=4, positive_mask=mask, pool_size=n - 1
    )
    got = sampled_softmax_loss(o, ctx)
    want = full_softmax_loss(o, 4)
    assert got.value == pytest.approx(want.value, abs=1e-12)
    np.testing.assert_allclose(got.grad_logits, want.grad_logits, atol=1e-12)


def test_sampled_softmax_matches_probability_form(rng):
    ctx = make_ctx(n_pos=1, n_neg=7, pool=50)
    o = rng.normal(size=8)
    adjusted = adjust_logits(o, ctx)
    p_t = np.exp(adjusted[0]) / np.sum(np.exp(adjusted))
    assert sampled_softmax_loss(o, ctx).value == pytest.approx(
        -np.log(p_t), abs=1e-12
    )


def test_sampled_softmax_rejects_extra_positives():
    ctx = make_ctx(n_pos=2, n_neg=3)
    with pytest.raises(ContractViolationError):
        sampled_softmax_loss(np.zeros(5), ctx)


# --- fedss loss -------------------------------------------------------------------


def test_fedss_reduces_to_full_softmax_over_all_classes(rng):
    n = 9
    o = rng.normal(size=n)
    mask = np.ones(n, dtype=bool)
    ctx = SampledLogitContext.uniform(
        labels=np.arange(n), target=2, positive_mask=mask, pool_size=1
    )
    got = fedss_loss(o, ctx)
    want = full_softmax_loss(o, 2)
    assert got.value == want.value
    np.testing.assert_allclose(got.grad_logits, want.grad_logits, rtol=0, atol=1e-15)


def test_fedss_single_label_loss_is_zero():
    ctx = make_ctx(n_pos=1, n_neg=0)
    assert fedss_loss(np.array([-2.0]), ctx).value == 0.0


def test_fedss_matches_rewritten_form(rng):
    ctx = make_ctx(n_pos=3, n_neg=6, pool=80, target=1)
    for _ in range(20):
        o = rng.normal(size=9) * 5
        a = fedss_loss(o, ctx).value
        b = fedss_loss_rewritten(o, ctx)
        assert a == pytest.approx(b, rel=1e-9)


def test_rewritten_equal_logits_is_log_k():
    ctx = make_ctx(n_pos=2, n_neg=3, pool=5)
    o = logit_adjustments(ctx).copy()  # cancels adjustments: o' all zero
    assert fedss_loss_rewritten(o, ctx) == pytest.approx(np.log(5.0), abs=1e-12)


def test_rewritten_dominant_target_is_tiny():
    ctx = make_ctx(n_pos=2, n_neg=3, pool=5, target=0)
    o = np.zeros(5)
    o[0] = 50.0
    assert fedss_loss_rewritten(o, ctx) < 1e-20


# --- ablation losses ------------------------------------------------------------


def test_negonly_empty_negatives_is_zero():
    ctx = make_ctx(n_pos=4, n_neg=0)
    assert negonly_loss(np.array([1.0, 9.0, -2.0, 0.0]), ctx).value == 0.0


def test_negonly_single_positive_equals_fedss(rng):
    ctx = make_ctx(n_pos=1, n_neg=5, pool=30)
    o = rng.normal(size=6)
    assert negonly_loss(o, ctx).value == pytest.approx(
        fedss_loss(o, ctx).value, abs=1e-12
    )


def test_negonly_never_exceeds_fedss(rng):
    ctx = make_ctx(n_pos=3, n_neg=5, pool=30)
    for _ in range(25):
        o = rng.normal(size=8) * 4
        assert negonly_loss(o, ctx).value <= fedss_loss(o, ctx).value + 1e-12


def test_negonly_excludes_copositives_from_denominator(rng):
    ctx = make_ctx(n_pos=2, n_neg=3, pool=30, target=0)
    o = rng.normal(size=5)
    adjusted = adjust_logits(o, ctx)
    want = np.log1p(np.sum(np.exp(adjusted[2:] - adjusted[0])))
    assert negonly_loss(o, ctx).value == pytest.approx(want, abs=1e-12)


def test_posonly_single_positive_is_zero():
    ctx = make_ctx(n_pos=1, n_neg=6)
    assert posonly_loss(np.zeros(7), ctx).value == 0.0


def test_posonly_all_classes_positive_equals_full_softmax(rng):
    n = 7
    o = rng.normal(size=n)
    mask = np.ones(n, dtype=bool)
    ctx = SampledLogitContext.uniform(
        labels=np.arange(n), target=3, positive_mask=mask, pool_size=1
    )
    assert posonly_loss(o, ctx).value == pytest.approx(
        full_softmax_loss(o, 3).value, abs=1e-12
    )


def test_posonly_matches_pairwise_form(rng):
    ctx = make_ctx(n_pos=4, n_neg=5, pool=60, target=2)
    o = rng.normal(size=9)
    want = np.log1p(
        np.sum(np.exp(np.delete(o[:4], 2) - o[2]))
    )  # positives carry no adjustment
    assert posonly_loss(o, ctx).value == pytest.approx(want, abs=1e-12)


def test_posonly_gradient_zero_at_negatives(rng):
    ctx = make_ctx(n_pos=3, n_neg=4, pool=30)
    out = posonly_loss(rng.normal(size=7), ctx)
    np.testing.assert_array_equal(out.grad_logits[3:], np.zeros(4))


# --- shared invariants ------------------------------------------------------------


@pytest.mark.parametrize("loss", [fedss_loss, negonly_loss, posonly_loss])
def test_losses_nonnegative_and_grad_finite(loss, rng):
    ctx = make_ctx(n_pos=3, n_neg=6, pool=100, target=1)
    for _ in range(20):
        out = loss(rng.normal(size=9) * 8, ctx)
        assert out.value >= 0.0
        assert np.all(np.isfinite(out.grad_logits))


def test_grad_logits_sums_to_zero(rng):
    ctx = make_ctx(n_pos=2, n_neg=6, pool=50)
    o = rng.normal(size=8)
    assert abs(fedss_loss(o, ctx).grad_logits.sum()) < 1e-9
    assert abs(full_softmax_loss(o, 3).grad_logits.sum()) < 1e-9


@given(logits_st, st.floats(min_value=-20, max_value=20))
def test_shift_invariance(o, c):
    ctx = make_ctx(n_pos=2, n_neg=4, pool=44)
    for loss in (fedss_loss, negonly_loss, posonly_loss):
        assert loss(o, ctx).value == pytest.approx(loss(o + c, ctx).value, abs=1e-9)


def test_permutation_invariance(rng):
    size = 8
    perm = rng.permutation(size)
    mask = np.zeros(size, dtype=bool)
    mask[[0, 1, 2]] = True
    o = rng.normal(size=size)
    ctx = SampledLogitContext.uniform(
        labels=np.arange(size), target=1, positive_mask=mask, pool_size=40
    )
    ctx_p = SampledLogitContext.uniform(
        labels=np.arange(size)[perm],
        target=int(np.where(perm == 1)[0][0]),
        positive_mask=mask[perm],
        pool_size=40,
    )
    for loss in (fedss_loss, negonly_loss, posonly_loss):
        assert loss(o, ctx).value == pytest.approx(loss(o[perm], ctx_p).value, abs=1e-12)


# --- backward to parameters ----------------------------------------------------------


def _tiny_setup(rng):
    config = ModelConfig(input_dim=5, hidden_dims=(6,), embedding_dim=4, n_classes=12)
    model = init_model(config, init_rng(7))
    x = rng.normal(size=5)
    ctx = make_ctx(n_pos=2, n_neg=4, pool=10)
    W_S = model.classifier[:, ctx.labels].copy()
    return model, x, ctx, W_S


def test_zero_grad_logits_gives_zero_param_grads(rng):
    model, x, ctx, W_S = _tiny_setup(rng)
    feats, fcache = forward_features(model.phi, x)
    _, lcache = cosine_logits(feats, W_S, 20.0)
    grads, gW = loss_backward_to_params(
        np.zeros(ctx.labels.size), lcache, fcache, model.phi, "cosine"
    )
    np.testing.assert_array_equal(gW, np.zeros_like(W_S))
    for gw, gb in grads:
        np.testing.assert_array_equal(gw, np.zeros_like(gw))
        np.testing.assert_array_equal(gb, np.zeros_like(gb))


def test_end_to_end_gradient_vs_finite_differences(rng):
    model, x, ctx, W_S = _tiny_setup(rng)

    def f(wflat):
        W = wflat.reshape(W_S.shape)
        feats, fcache = forward_features(model.phi, x)
        o, lcache = cosine_logits(feats, W, 20.0)
        out = fedss_loss(o, ctx)
        _, gW = loss_backward_to_params(
            out.grad_logits, lcache, fcache, model.phi, "cosine"
        )
        return out.value, gW.ravel()

    assert gradient_check(f, W_S.ravel()) < 1e-4


def test_end_to_end_extractor_gradient_vs_finite_differences(rng):
    model, x, ctx, W_S = _tiny_setup(rng)
    w0 = model.phi.layers[0][0]

    def f(wflat):
        phi = model.phi.copy()
        phi.layers[0] = (wflat.reshape(w0.shape), phi.layers[0][1])
        feats, fcache = forward_features(phi, x)
        o, lcache = cosine_logits(feats, W_S, 20.0)
        out = fedss_loss(o, ctx)
        grads, _ = loss_backward_to_params(
            out.grad_logits, lcache, fcache, phi, "cosine"
        )
        return out.value, grads[0][0].ravel()

    assert gradient_check(f, w0.ravel()) < 1e-4


def test_unused_column_gradient_is_pure_push(rng):
    """Columns that are never the target only feel the softmax push term."""
    model, x, ctx, W_S = _tiny_setup(rng)
    j = 5  # a sampled negative position

    def f(col):
        W = W_S.copy()
        W[:, j] = col
        feats, fcache = forward_features(model.phi, x)
        o, lcache = cosine_logits(feats, W, 20.0)
        out = fedss_loss(o, ctx)
        _, gW = loss_backward_to_params(
            out.grad_logits, lcache, fcache, model.phi, "cosine"
        )
        return out.value, gW[:, j]

    assert gradient_check(f, W_S[:, 5].copy()) < 1e-4
    # The push direction increases the negative's probability mass.
    feats, _ = forward_features(model.phi, x)
    o, lcache = cosine_logits(feats, W_S, 20.0)
    out = fedss_loss(o, ctx)
    assert out.grad_logits[j] > 0.0


# --- batched path -----------------------------------------------------------------


def test_minibatch_matches_per_example_losses(rng):
    ctx = make_ctx(n_pos=3, n_neg=5, pool=60)
    adjustments = logit_adjustments(ctx)
    logits = rng.normal(size=(4, 8)) * 3
    targets = np.array([0, 1, 2, 0])
    for objective, loss in [
        ("fedss", fedss_loss),
        ("negonly", negonly_loss),
        ("posonly", posonly_loss),
    ]:
        values, grads = minibatch_loss_and_grad(
            logits, targets, ctx.positive_mask, adjustments, objective
        )
        for i in range(4):
            ctx_i = SampledLogitContext(
                labels=ctx.labels,
                target=int(targets[i]),
                positive_mask=ctx.positive_mask,
                proposal_q=ctx.proposal_q,
            )
            out = loss(logits[i], ctx_i)
            assert values[i] == pytest.approx(out.value, abs=1e-12)
            np.testing.assert_allclose(grads[i], out.grad_logits, atol=1e-12)


def test_minibatch_rejects_target_at_negative():
    mask = np.array([True, False, False])
    with pytest.raises(ContractViolationError):
        minibatch_loss_and_grad(
            np.zeros((1, 3)), np.array([2]), mask, np.zeros(3), "fedss"
        )


def test_objective_for_method_table():
    assert objective_for_method("fedss") == "fedss"
    assert objective_for_method("negonly_matched") == "negonly"
    assert objective_for_method("fedaws") == "posonly"
    with pytest.raises(ContractViolationError):
        objective_for_method("pairwise")


# --- sampling bias decays with more negatives -----------------------------------


def test_mean_sampled_gradient_approaches_full_softmax():
    """Averaged over many negative draws, the scattered sampled-softmax
    gradient drifts toward the full-softmax gradient as m grows."""
    rng = np.random.default_rng(0)
    n = 40
    o_full = rng.normal(size=n) * 2
    t = 7
    full = full_softmax_loss(o_full, t).grad_logits
    pool = np.delete(np.arange(n), t)
    errs = []
    for m in (2, 8, 32):
        acc = np.zeros(n)
        reps = 1500
        for _ in range(reps):
            neg = rng.choice(pool, size=m, replace=False)
            labels = np.concatenate(([t], neg))
            mask = np.zeros(m + 1, dtype=bool)
            mask[0] = True
            ctx = SampledLogitContext.uniform(
                labels=labels, target=0, positive_mask=mask, pool_size=n - 1
            )
            out = sampled_softmax_loss(o_full[labels], ctx)
            acc[labels] += out.grad_logits
        errs.append(np.linalg.norm(acc / reps - full))
    assert errs[0] > errs[1] > errs[2]
