import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fqsr.errors import ParameterError, ShapeError, StateError
from fqsr.quantizer import (
    QuantParams,
    init_interval_warmup,
    integer_code,
    quantize,
    quantize_backward,
    round_half_away,
    sqcl_backward,
    sqcl_loss,
)


def qp(bits, signed, interval, **kw):
    return QuantParams(bits, signed, interval, frozen=True, **kw)


def test_round_half_away_from_zero():
    x = np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49999999999999994, -2.4999])
    assert round_half_away(x).tolist() == [1, 2, 3, -1, -2, 0, -2]


def test_zero_maps_to_zero():
    for bits in (1, 4, 8):
        for signed in (False, True):
            assert quantize(np.zeros(3), qp(bits, signed, 0.7)).tolist() == [0, 0, 0]
            assert integer_code(np.zeros(1), qp(bits, signed, 0.7)).tolist() == [0]


def test_scalar_examples():
    p = qp(2, False, 1.0)
    # 0.30 * 3 = 0.9 -> code 1 -> 1/3
    assert integer_code(np.array(0.30), p) == 1
    assert quantize(np.array(0.30), p) == pytest.approx(1 / 3, abs=1e-15)
    # clip saturates to I
    assert quantize(np.array(2.5), p) == 1.0
    assert integer_code(np.array(-0.5), qp(4, True, 0.5)) == -15


def test_codes_dequantize_exactly():
    rng = np.random.default_rng(0)
    v = rng.normal(0, 2, 1000)
    p = qp(5, True, 1.3)
    assert np.array_equal(integer_code(v, p) * p.step, quantize(v, p))


def test_non_positive_interval_rejected():
    for bad in (0.0, -1.0):
        with pytest.raises(ParameterError):
            quantize(np.ones(2), QuantParams(4, True, bad))


def test_full_precision_is_identity():
    v = np.random.default_rng(1).normal(size=20)
    p = QuantParams(32, True)
    assert np.array_equal(quantize(v, p), v)
    assert sqcl_loss(v, p) == 0.0


def test_warmup_single_batch():
    p = QuantParams(4, False, warmup_l=1)
    init_interval_warmup(p, np.array([0.5, 2.0, -3.0]))
    assert p.interval == 2.0 and p.frozen


def test_warmup_mean_of_maxes_and_freeze():
    p = QuantParams(4, False, warmup_l=2)
    init_interval_warmup(p, np.array([1.0, 0.2]))
    assert not p.frozen
    init_interval_warmup(p, np.array([3.0]))
    assert p.interval == 2.0 and p.frozen
    with pytest.raises(StateError):
        init_interval_warmup(p, np.array([1.0]))


def test_warmup_signed_uses_abs():
    p = QuantParams(4, True, warmup_l=1)
    init_interval_warmup(p, np.array([0.5, -4.0]))
    assert p.interval == 4.0


def test_warmup_rejects_empty():
    with pytest.raises(ShapeError):
        init_interval_warmup(QuantParams(4, True), np.array([]))


def test_backward_clip_region_unsigned():
    p = qp(3, False, 1.0)
    v = np.array([2.0, 5.0])
    up = np.array([0.7, -1.1])
    g = quantize_backward(v, p, up)
    assert g.grad_input.tolist() == [0.0, 0.0]
    assert g.grad_interval == pytest.approx(0.7 - 1.1)


def test_backward_on_lattice_has_zero_interval_grad():
    p = qp(3, True, 1.4)
    v = np.array([3, -5, 1]) * p.step
    g = quantize_backward(v, p, np.ones(3))
    assert g.grad_input.tolist() == [1.0, 1.0, 1.0]
    assert abs(g.grad_interval) < 1e-12


def test_backward_zero_upstream():
    p = qp(4, True, 0.8)
    v = np.random.default_rng(2).normal(size=50)
    g = quantize_backward(v, p, np.zeros(50))
    assert not g.grad_input.any() and g.grad_interval == 0.0


def test_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        quantize_backward(np.zeros(3), qp(4, True, 1.0), np.zeros(4))


def test_backward_lower_clip_signed():
    p = qp(4, True, 0.5)
    g = quantize_backward(np.array([-3.0]), p, np.array([2.0]))
    assert g.grad_interval == -2.0


@pytest.mark.parametrize("signed", [False, True])
def test_interval_grad_matches_finite_differences_in_clip_region(signed):
    rng = np.random.default_rng(5)
    interval = 0.8
    mag = interval * rng.uniform(1.1, 3.0, 64)
    v = np.concatenate([mag, -mag]) if signed else mag
    up = rng.normal(size=v.shape)
    p = qp(4, signed, interval)
    g = quantize_backward(v, p, up).grad_interval

    def f(i):
        return float(np.sum(up * quantize(v, qp(4, signed, i))))

    h = 1e-6
    fd = (f(interval + h) - f(interval - h)) / (2 * h)
    assert g == pytest.approx(fd, rel=1e-6)


def test_sqcl_examples():
    p = qp(2, False, 1.0)
    assert sqcl_loss(np.array([0.30]), p) == pytest.approx(1 / 3 - 0.3, abs=1e-15)
    assert sqcl_loss(np.array([2.5]), p) == pytest.approx(1.5)
    assert sqcl_loss(np.array([0.0, 1 / 3, 2 / 3, 1.0]) * 1.0, p) < 1e-15
    assert sqcl_loss(np.array([0.30, 2.5]), p, "L2") == pytest.approx(np.sqrt(((1 / 3 - 0.3) ** 2 + 1.5 ** 2) / 2))


def test_sqcl_unknown_norm():
    with pytest.raises(ParameterError):
        sqcl_loss(np.ones(2), qp(2, False, 1.0), "L3")


@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_sqcl_backward_matches_finite_differences(norm):
    rng = np.random.default_rng(11)
    p = qp(3, True, 1.0)
    # clip region only: in range the interval gradient is the STE surrogate, not the true derivative
    v = rng.choice([-1.0, 1.0], 40) * rng.uniform(1.1, 2.0, 40)
    g = sqcl_backward(v, p, norm)
    h = 1e-7
    fd_i = (sqcl_loss(v, qp(3, True, 1.0 + h), norm) - sqcl_loss(v, qp(3, True, 1.0 - h), norm)) / (2 * h)
    assert g.grad_interval == pytest.approx(fd_i, rel=1e-5)
    k = 3
    e = np.zeros_like(v)
    e[k] = h
    fd_v = (sqcl_loss(v + e, p, norm) - sqcl_loss(v - e, p, norm)) / (2 * h)
    assert g.grad_input[k] == pytest.approx(fd_v, rel=1e-5)


# property suite -------------------------------------------------------------

params = st.builds(
    lambda bits, signed, interval: qp(bits, signed, interval),
    st.integers(1, 8),
    st.booleans(),
    st.floats(0.01, 100.0),
)
reals = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(p=params, v=st.lists(reals, min_size=1, max_size=50))
def test_idempotent(p, v):
    q = quantize(np.array(v), p)
    assert np.array_equal(quantize(q, p), q)


@settings(max_examples=300, deadline=None)
@given(p=params, a=reals, b=reals)
def test_monotone(p, a, b):
    lo, hi = min(a, b), max(a, b)
    assert quantize(np.array(lo), p) <= quantize(np.array(hi), p)


@settings(max_examples=300, deadline=None)
@given(p=params, v=st.lists(reals, min_size=1, max_size=50))
def test_bounded_and_on_lattice(p, v):
    v = np.array(v)
    q = quantize(v, p)
    clipped = np.clip(v, p.lower * p.interval, p.interval)
    assert np.all(np.abs(q - clipped) <= p.interval / (2 * p.levels) * (1 + 1e-12) + 1e-12 * p.interval)
    k = q / p.step
    assert np.allclose(k, np.round(k), atol=1e-9)
    assert np.all(q >= p.lower * p.interval - 1e-12) and np.all(q <= p.interval * (1 + 1e-12))


@settings(max_examples=200, deadline=None)
@given(p=params, v=st.lists(reals, min_size=1, max_size=30))
def test_sqcl_nonnegative_and_zero_on_lattice(p, v):
    v = np.array(v)
    assert sqcl_loss(v, p) >= 0
    assert sqcl_loss(quantize(v, p), p) < 1e-12 * max(1.0, p.interval)
