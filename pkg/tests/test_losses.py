import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from care.losses import (
    LOG_2PI,
    assign_confidence_targets,
    image_level_targets,
    kept_count,
    loss_absolute_error,
    loss_confidence,
    loss_error_sorting,
    loss_gaussian_nll,
    loss_regression,
)
from care.tensor import Tensor


def brute_force_targets(errors, eta):
    """Independent labeler: repeatedly pick the smallest remaining error (lowest index on ties)."""
    remaining = list(range(len(errors)))
    out = [0] * len(errors)
    for _ in range(math.floor(round(eta * len(errors), 9))):
        best = min(remaining, key=lambda i: (errors[i], i))
        out[best] = 1
        remaining.remove(best)
    return out


def test_targets_hand_sorted_example():
    assert assign_confidence_targets([0.1, 0.5, 0.2, 0.3, 0.4], 0.8).tolist() == [1, 0, 1, 1, 1]


def test_targets_ties_broken_by_index():
    assert assign_confidence_targets([0.3] * 4, 0.5).tolist() == [1, 1, 0, 0]


def test_targets_already_sorted():
    out = assign_confidence_targets(np.linspace(0, 1, 10), 0.8)
    assert out.tolist() == [1] * 8 + [0] * 2


@pytest.mark.parametrize("bad", [[], [0.1]])
def test_targets_need_two_errors(bad):
    with pytest.raises(ValueError, match="at least 2"):
        assign_confidence_targets(bad, 0.8)


def test_targets_reject_negative_error():
    with pytest.raises(ValueError, match="non-negative"):
        assign_confidence_targets([0.1, -0.2], 0.5)


def test_kept_count_avoids_float_truncation():
    assert kept_count(0.29, 100) == 29
    assert kept_count(0.8, 5) == 4


@settings(max_examples=200, deadline=None)
@given(
    errors=st.lists(st.floats(0, 1, allow_nan=False).map(lambda v: round(v, 2)), min_size=2, max_size=40),
    eta=st.sampled_from([0.5, 0.8, 0.9, 0.3]),
)
def test_targets_match_brute_force(errors, eta):
    assert assign_confidence_targets(errors, eta).astype(int).tolist() == brute_force_targets(errors, eta)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), eta=st.floats(0.05, 0.95))
def test_targets_invariant_under_permutation_with_distinct_errors(seed, eta):
    rng = np.random.default_rng(seed)
    errors = rng.permutation(50) / 50.0
    perm = rng.permutation(50)
    base = assign_confidence_targets(errors, eta)
    np.testing.assert_array_equal(assign_confidence_targets(errors[perm], eta), base[perm])


def test_image_level_targets_label_whole_images():
    errors = np.stack([np.full((2, 2), v) for v in (0.1, 0.9, 0.2, 0.3)])
    out = image_level_targets(errors, 0.75)
    assert [int(out[i, 0, 0]) for i in range(4)] == [1, 0, 1, 1]
    assert np.all(out == out[:, :1, :1])


# losses --------------------------------------------------------------------------

def t(v):
    return Tensor(np.asarray(v, dtype=np.float32))


def test_regression_identity_is_zero():
    assert loss_regression(t([0.3, 0.2]), t([0.3, 0.2])).item() == 0.0


def test_regression_hand_example():
    assert loss_regression(t([0.5, 0.0]), t([0.0, 0.0])).item() == pytest.approx(0.125, abs=1e-7)


def test_regression_unit_error():
    assert loss_regression(t([1.0]), t([0.0])).item() == pytest.approx(1.0, abs=1e-7)


def test_regression_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        loss_regression(t([1.0, 2.0]), t([1.0]))


def test_confidence_zero_when_confidence_matches_target():
    assert loss_confidence(t([0.9, 0.1]), t([0.2, 0.4]), t([1.0, 0.0]), t([1.0, 0.0])).item() == 0.0


def test_confidence_zero_when_prediction_exact():
    assert loss_confidence(t([0.4, 0.1]), t([0.4, 0.1]), t([0.3, 0.9]), t([1.0, 0.0])).item() == 0.0


def test_confidence_single_pixel_hand_example():
    val = loss_confidence(t([0.7]), t([0.5]), t([0.7]), t([1.0])).item()
    assert val == pytest.approx(0.2 * 0.09, abs=1e-7)


def test_error_sorting_and_absolute_error_values():
    assert loss_error_sorting(t([0.5, 1.0]), t([1.0, 0.0])).item() == pytest.approx((0.25 + 1.0) / 2, abs=1e-7)
    # u = 1 - c = [0.1, 0.5] regressing errors [0.1, 0.3]
    val = loss_absolute_error(t([0.6, 0.3]), t([0.5, 0.0]), t([0.9, 0.5])).item()
    assert val == pytest.approx((0.0 + 0.04) / 2, abs=1e-7)


def test_nll_closed_forms():
    zero = loss_gaussian_nll(t([0.5]), t([0.0]), t([0.5])).item()
    assert zero == pytest.approx(0.5 * LOG_2PI, abs=1e-6)
    assert zero == pytest.approx(0.91894, abs=1e-5)
    assert loss_gaussian_nll(t([0.0]), t([0.0]), t([1.0])).item() == pytest.approx(1.41894, abs=1e-5)


@pytest.mark.parametrize("r", [0.05, 0.3, 1.0, 2.5])
def test_nll_minimized_at_log_squared_residual(r):
    grid = np.linspace(np.log(r**2) - 2, np.log(r**2) + 2, 4001)
    vals = [loss_gaussian_nll(Tensor([0.0], dtype=np.float64), Tensor([lv], dtype=np.float64), np.array([r])).item() for lv in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(np.log(r**2), abs=2e-3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-5, 5), st.floats(-1, 1)), min_size=1, max_size=10))
def test_nll_above_its_analytic_minimum(triples):
    mu, lv, ys = (np.array(v, dtype=np.float64) for v in zip(*triples))
    per_pixel_min = 0.5 * (LOG_2PI + np.log(np.maximum((ys - mu) ** 2, 1e-300)) + 1.0)
    nll = loss_gaussian_nll(Tensor(mu, dtype=np.float64), Tensor(lv, dtype=np.float64), ys).item()
    assert nll >= per_pixel_min.mean() - 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    y, ys, c = rng.random((3, 4, 4))
    cs = assign_confidence_targets(np.abs(y - ys).ravel(), 0.8).reshape(4, 4)
    assert loss_regression(t(y), ys).item() >= 0
    assert loss_confidence(t(y), ys, t(c), cs).item() >= 0
