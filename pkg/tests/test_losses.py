import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mutualprompt import losses as L
from mutualprompt.prompter import PromptedPair

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def _pair(v, s):
    return PromptedPair(_t(v), _t(s))


def _logp(probs):
    return _t(probs).log()


# -- heads -------------------------------------------------------------------


def test_identical_texts_give_uniform_probabilities(rng):
    s = np.tile(rng.standard_normal(8), (2, 4, 1))
    probs = L.classify(_pair(rng.standard_normal((2, 8)), s), 0.01)
    assert torch.allclose(probs, torch.full((2, 4), 0.25, dtype=torch.float64), atol=1e-15)


def test_two_class_saturated_probabilities_match_direct_softmax():
    pair = _pair([[1.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]])
    probs = L.classify(pair, 0.01)[0]
    # oracle: softmax of (1/0.01, 0/0.01)
    assert math.isclose(float(probs[0]), 1.0, rel_tol=1e-15)
    assert math.isclose(float(probs[1]), math.exp(-100.0) / (1 + math.exp(-100.0)), rel_tol=1e-12)
    assert math.isclose(float(probs[1]), 3.7e-44, rel_tol=0.01)


@given(
    arrays(np.float64, (3, 6), elements=finite),
    arrays(np.float64, (3, 4, 6), elements=finite),
    st.floats(0.01, 100),
    arrays(np.float64, (4,), elements=st.floats(0.01, 100)),
)
def test_classify_invariant_to_positive_rescaling(v, s, c, per_class):
    if np.linalg.norm(v, axis=-1).min() < 1e-3 or np.linalg.norm(s, axis=-1).min() < 1e-3:
        return
    base = L.classify(_pair(v, s), 0.05)
    scaled = L.classify(_pair(c * v, s * per_class[None, :, None]), 0.05)
    assert torch.allclose(base, scaled, atol=1e-10, rtol=0)


def test_zero_norm_rejected():
    with pytest.raises(ValueError, match="zero"):
        L.classify(_pair(np.zeros((1, 4)), np.ones((1, 2, 4))), 0.01)


def test_zero_shot_argmax_invariant_to_single_class_rescaling(rng):
    v, s = _t(rng.standard_normal((5, 8))), _t(rng.standard_normal((3, 8)))
    scaled = s.clone()
    scaled[1] *= 7.5
    a = L.zero_shot_classify(v, s, 0.01).argmax(-1)
    b = L.zero_shot_classify(v, scaled, 0.01).argmax(-1)
    assert torch.equal(a, b)


def test_zero_shot_equals_classify_on_unprompted_pair(rng):
    v, s = _t(rng.standard_normal((5, 8))), _t(rng.standard_normal((3, 8)))
    pair = PromptedPair(v, s.expand(5, -1, -1))
    assert torch.allclose(L.zero_shot_classify(v, s, 0.01), L.classify(pair, 0.01), atol=0)


def test_probabilities_sum_to_one(rng):
    probs = L.classify(_pair(rng.standard_normal((4, 8)), rng.standard_normal((4, 5, 8))), 0.01)
    assert torch.allclose(probs.sum(-1), torch.ones(4, dtype=torch.float64), atol=1e-6)


# -- instance discrimination -------------------------------------------------


def test_idc_single_instance_is_zero(rng):
    assert float(L.l_idc(_pair(rng.standard_normal((1, 8)), rng.standard_normal((1, 3, 8))), 0.01)) == 0.0


def test_idc_two_instance_oracle():
    loss = L.idc_from_similarity(_t([[10.0, 0.0], [0.0, 10.0]]))
    expected = math.log1p(math.exp(-10.0))
    assert math.isclose(float(loss), expected, rel_tol=1e-12)
    assert math.isclose(float(loss), 4.54e-5, rel_tol=1e-3)


def test_idc_rejects_empty_batch():
    with pytest.raises(ValueError):
        L.l_idc(_pair(np.zeros((0, 4)), np.zeros((0, 2, 4))), 0.01)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(5)), elements=finite), st.integers(0, 2**31))
def test_idc_nonnegative(v, seed):
    s = np.random.default_rng(seed).standard_normal((v.shape[0], 3, 5))
    if np.linalg.norm(v, axis=-1).min() < 1e-3:
        return
    assert float(L.l_idc(_pair(v, s), 0.01)) >= 0.0


def test_idc_similarity_matches_definition(rng):
    v, s = rng.standard_normal((3, 6)), rng.standard_normal((3, 4, 6))
    sim = L.instance_similarity(_pair(v, s), 0.1).numpy()
    cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)  # noqa: E731
    oracle = np.array([[np.mean([cos(s[a, k], v[b]) for k in range(4)]) / 0.1 for b in range(3)] for a in range(3)])
    assert np.allclose(sim, oracle, atol=1e-12)


@given(arrays(np.float64, (4, 4), elements=finite), st.integers(0, 3), st.integers(0, 3), st.floats(0.01, 3))
def test_idc_decreases_when_off_diagonal_similarity_decreases(sim, a, b, delta):
    if a == b:
        return
    lower = sim.copy()
    lower[a, b] -= delta
    assert float(L.idc_from_similarity(_t(lower))) < float(L.idc_from_similarity(_t(sim)))


# -- cross-entropy families --------------------------------------------------


def test_ce_zero_at_certain_label():
    lp = _t([[0.0, -np.inf, -np.inf]])
    assert float(L.l_sup_source(lp, [0])) == 0.0
    assert float(L.l_sc_source(lp, [0])) == 0.0


def test_sc_two_sample_oracle():
    lp = _logp([[0.5, 0.5], [0.25, 0.75]])
    expected = (math.log(2) + math.log(4)) / 2
    assert math.isclose(float(L.l_sc_source(lp, [0, 0])), expected, rel_tol=1e-12)
    assert math.isclose(expected, 1.0397, abs_tol=5e-5)


def test_uniform_three_class_ce_is_log3():
    lp = _logp([[1 / 3, 1 / 3, 1 / 3]])
    assert math.isclose(float(L.l_sup_source(lp, [2])), math.log(3), rel_tol=1e-12)


def test_target_terms_zero_when_nothing_confident():
    weak = _logp([[0.4, 0.3, 0.3], [0.3, 0.5, 0.2]])
    strong = _logp([[0.1, 0.8, 0.1], [0.2, 0.2, 0.6]])
    assert float(L.l_sc_target(strong, [0, 1], weak, 0.6)) == 0.0
    assert float(L.l_sup_target(weak, [0, 1], 0.6)) == 0.0


def test_gate_includes_confidence_exactly_at_threshold():
    weak = _logp([[0.5, 0.5], [0.25, 0.75]])
    mask = L.confidence_mask(weak, [0, 0], 0.5)
    assert mask.tolist() == [True, False]
    # only the first sample counts; mean over the whole batch
    assert math.isclose(float(L.l_sup_target(weak, [0, 0], 0.5)), math.log(2) / 2, rel_tol=1e-12)


def test_sc_target_uses_weak_confidence_and_strong_ce():
    weak = _logp([[0.9, 0.1], [0.2, 0.8]])
    strong = _logp([[0.5, 0.5], [0.5, 0.5]])
    val = L.l_sc_target(strong, [0, 0], weak, 0.6)
    assert math.isclose(float(val), math.log(2) / 2, rel_tol=1e-12)


def test_label_out_of_range_rejected():
    with pytest.raises(ValueError, match="out of range"):
        L.l_sup_source(_logp([[0.5, 0.5]]), [2])
    with pytest.raises(ValueError, match="out of range"):
        L.l_sc_target(_logp([[0.5, 0.5]]), [-1], _logp([[0.5, 0.5]]), 0.5)


def test_gate_carries_no_gradient():
    logits = _t([[2.0, 0.0], [0.0, 1.0]]).requires_grad_(True)
    lp = torch.log_softmax(logits, -1)
    L.confidence_mask(lp, [0, 1], 0.5)
    assert logits.grad is None


# -- information maximization ------------------------------------------------


def test_im_zero_for_uniform_predictions():
    lp = _logp(np.full((4, 5), 0.2))
    assert abs(float(L.l_im(lp))) < 1e-15


def test_im_two_one_hot_samples_is_minus_log2():
    lp = torch.log_softmax(_t([[50.0, -50.0], [-50.0, 50.0]]), -1)
    assert math.isclose(float(L.l_im(lp)), -math.log(2), rel_tol=1e-12)


def test_im_handles_exact_zero_probabilities():
    lp = _t([[0.0, -np.inf], [-np.inf, 0.0]]).requires_grad_(True)
    val = L.l_im(lp)
    assert math.isclose(float(val.detach()), -math.log(2), rel_tol=1e-12)
    val.backward()
    assert torch.isfinite(lp.grad).all()


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 6)), elements=st.floats(-20, 20)))
def test_im_nonpositive_with_brute_force_entropies(logits):
    lp = torch.log_softmax(_t(logits), -1)
    p = lp.exp().numpy()
    h = lambda q: -np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0), axis=-1)  # noqa: E731
    oracle = h(p).mean() - h(p.mean(0))
    val = float(L.l_im(lp))
    assert abs(val - oracle) < 1e-9
    assert val <= 1e-12


@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-10, 10)), st.integers(1, 8))
def test_im_zero_for_identical_rows(row, n):
    lp = torch.log_softmax(_t(np.tile(row, (n, 1))), -1)
    assert abs(float(L.l_im(lp))) < 1e-12


def test_im_strictly_negative_for_distinct_rows():
    lp = _logp([[0.6, 0.4], [0.4, 0.6]])
    assert float(L.l_im(lp)) < 0


def test_im_rejects_empty():
    with pytest.raises(ValueError):
        L.l_im(torch.zeros(0, 3, dtype=torch.float64))


# -- total -------------------------------------------------------------------


def test_total_without_regularizer_weights():
    sup, sc, idc, im = (_t(x) for x in (1.5, 0.7, 2.0, -0.3))
    w = L.LossWeights(lambda_c=0.0, lambda_i=0.0)
    assert float(L.l_all(sup, sc, idc, im, w)) == pytest.approx(2.2, abs=1e-15)


def test_total_is_affine_in_lambda_i():
    sup, sc, idc, im = (_t(x) for x in (1.5, 0.7, 2.0, -0.3))
    f = lambda lam: float(L.l_all(sup, sc, idc, im, L.LossWeights(lambda_i=lam)))  # noqa: E731
    assert (f(1.0 + 1e-3) - f(1.0 - 1e-3)) / 2e-3 == pytest.approx(-0.3, abs=1e-10)


def test_default_weights():
    w = L.LossWeights()
    assert (w.lambda_c, w.lambda_i, w.tau) == (1.0, 1.0, 0.01)


def test_weights_reject_bad_values():
    with pytest.raises(ValueError):
        L.LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        L.LossWeights(lambda_c=-1.0)
