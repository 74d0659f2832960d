import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fcasim.errors import ValidationError
from fcasim.metrics import centered_moving_average, dice, dice_report, mdice, rolling_std, stability

masks = hnp.arrays(np.bool_, (6, 6))


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0, :3] = True
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert dice(a, b) == 0.0
    x = np.zeros(8, bool)
    y = np.zeros(8, bool)
    x[:4] = True
    y[2:6] = True
    assert dice(x, y) == 0.5


def test_dice_both_empty_is_one():
    assert dice(np.zeros(5), np.zeros(5)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValidationError):
        dice(np.zeros(3), np.zeros(4))


@given(masks, masks)
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_mdice_examples():
    assert mdice([0.7]) == 0.7
    assert mdice([1.0, 0.0]) == 0.5
    assert mdice([0.9, 0.6, 0.3]) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValidationError):
        mdice([])


@given(st.permutations([0.1, 0.25, 0.5, 0.75, 1.0]))
def test_mdice_order_invariant(vals):
    assert mdice(vals) == pytest.approx(0.52, abs=1e-15)


def test_dice_report_thresholds_sigmoid_at_half():
    logits = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 3, 1)
    gt = np.array([0.0, 1.0, 1.0]).reshape(1, 1, 3, 1)
    rep = dice_report(logits, gt)
    assert rep.per_class == [1.0] and rep.mdice == 1.0


def test_dice_report_pools_over_samples():
    logits = np.full((2, 2, 2, 1), -5.0)
    logits[0, 0, 0, 0] = 5.0
    gt = np.zeros((2, 2, 2, 1))
    gt[0, 0, 0, 0] = gt[1, 0, 0, 0] = 1.0
    # pooled: |A|=1, |B|=2, |A&B|=1 -> 2/3
    assert dice_report(logits, gt).mdice == pytest.approx(2 / 3)


def test_rolling_std_examples():
    assert not rolling_std([0.4] * 7, 3).any()
    np.testing.assert_allclose(rolling_std([0, 1, 0, 1, 0, 1], 2), 0.5, atol=1e-15)


def test_rolling_std_too_short():
    with pytest.raises(ValidationError):
        rolling_std([1.0, 2.0], 3)
    with pytest.raises(ValidationError):
        rolling_std([1.0, 2.0], 1)


@given(st.lists(st.floats(-1e3, 1e3), min_size=5, max_size=40), st.integers(2, 5))
def test_rolling_std_nonnegative_and_deterministic(xs, w):
    r = rolling_std(xs, w)
    assert np.all(r >= 0) and len(r) == len(xs) - w + 1
    assert np.array_equal(r, rolling_std(list(xs), w))


def test_centered_moving_average_oracle():
    out = centered_moving_average([0.0, 3.0, 6.0, 9.0, 12.0], 3)
    np.testing.assert_allclose(out, [1.5, 3.0, 6.0, 9.0, 10.5])


@given(st.lists(st.floats(0, 1), min_size=5, max_size=40))
def test_rounds_to_threshold_on_monotone_series(xs):
    series = sorted(xs)
    rep = stability(series, 5)
    assert rep.rounds_to_threshold is not None
    assert 0 <= rep.rounds_to_threshold <= len(series) - 1
    assert rep.mean_rolling_std >= 0
