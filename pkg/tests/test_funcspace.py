import numpy as np
import pytest
from hypothesis import given, strategies as st

from ivrl.funcspace import BoxedLinearW, FeatureMap, LinearV, SoftmaxPolicy, eval_feature, policy_probs


def test_feature_at_zero():
    np.testing.assert_array_equal(eval_feature(FeatureMap(4), 0.0), [1, 0, 0, 0, 0])


def test_feature_powers():
    np.testing.assert_array_equal(eval_feature(FeatureMap(4), 2.0), [1, 2, 4, 8, 16])


def test_standardized_feature():
    np.testing.assert_allclose(eval_feature(FeatureMap(4, (2.0, 2.0)), 4.0), np.ones(5))


def test_zero_weights_give_uniform():
    p = SoftmaxPolicy.uniform(3, FeatureMap(4))
    np.testing.assert_allclose(p.probs(np.linspace(-1, 1, 7)), 1 / 3)


@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5), st.floats(-5, 5))
def test_softmax_shift_invariance(shift, s):
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 5))
    fm = FeatureMap(4)
    a = policy_probs(SoftmaxPolicy(w, fm), s)
    b = policy_probs(SoftmaxPolicy(w + np.asarray(shift), fm), s)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_saturation():
    w = np.zeros((3, 5))
    w[1, 0] = 50.0
    p = SoftmaxPolicy(w, FeatureMap(4)).probs(0.3)
    assert p[1] >= 1 - 1e-20


def test_linear_classes_evaluate_features():
    fm = FeatureMap(2)
    v = LinearV(np.array([1.0, 2.0, 3.0]), fm)
    assert v(2.0) == pytest.approx(1 + 4 + 12)
    w = BoxedLinearW(np.array([0.5, -0.5, 0.0]), 1.0, fm)
    assert w(1.0) == pytest.approx(0.0)


def test_boxed_w_rejects_out_of_box():
    with pytest.raises(ValueError):
        BoxedLinearW(np.array([2.0, 0.0, 0.0]), 1.0, FeatureMap(2))
