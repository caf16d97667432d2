from __future__ import annotations

import numpy as np
import pytest

from app.core import ops
from app.core.errors import ConfigurationError, CorruptionError
from app.core.quantizer import (
    QuantizedTensor,
    QuantizerConfig,
    QuantScheme,
    clip,
    dequantize,
    dequantize_array,
    fake_quantize,
    levels_for,
    normalize,
    pot_levels,
    project,
    quant_error,
    quantize,
    ste_backward_alpha,
    ste_backward_w,
    uniform_levels,
)
from app.core.tensor import Tape, Tensor

SCHEMES = (QuantScheme.UNIFORM, QuantScheme.POT)


def frozen(scheme=QuantScheme.UNIFORM, bits=8, alpha=3.0, mu=0.0, sigma=1.0):
    return QuantizerConfig(scheme=scheme, bits=bits, alpha=alpha, mu=mu, sigma=sigma)


# -------------------------
# Niveaux
# -------------------------

def test_uniform_levels_b2():
    np.testing.assert_allclose(uniform_levels(1.0, 2).values, [-1.0, 0.0, 1.0])


def test_uniform_levels_b3_half_alpha():
    expected = np.array([-0.5, -1 / 3, -1 / 6, 0.0, 1 / 6, 1 / 3, 0.5])
    np.testing.assert_allclose(uniform_levels(0.5, 3).values, expected, rtol=0, atol=1e-15)


def test_uniform_levels_b4_step():
    lv = uniform_levels(1.0, 4)
    assert len(lv) == 15
    np.testing.assert_allclose(np.diff(lv.values), np.full(14, 1 / 7))


def test_pot_levels_b4():
    pos = 2.0 ** np.arange(-6, 1)
    expected = np.concatenate([-pos[::-1], [0.0], pos])
    np.testing.assert_array_equal(pot_levels(1.0, 4).values, expected)


def test_pot_levels_b3_alpha2():
    np.testing.assert_array_equal(pot_levels(2.0, 3).values, [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])


@pytest.mark.parametrize("bits", range(2, 9))
@pytest.mark.parametrize("scheme", SCHEMES)
def test_level_set_laws(scheme, bits):
    lv = levels_for(scheme, 1.5, bits)
    v = lv.values
    assert len(lv) == 2 ** bits - 1
    np.testing.assert_array_equal(v, -v[::-1])
    assert 0.0 in v
    assert v.max() == pytest.approx(1.5) and v.min() == pytest.approx(-1.5)
    assert np.all(np.diff(v) > 0)
    np.testing.assert_allclose(levels_for(scheme, 3.0, bits).values, 2.0 * v)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_b2_uniform_equals_pot(alpha):
    np.testing.assert_array_equal(uniform_levels(alpha, 2).values, pot_levels(alpha, 2).values)


@pytest.mark.parametrize("bits", [1, 9, 2.5])
def test_invalid_bitwidth(bits):
    with pytest.raises(ConfigurationError):
        uniform_levels(1.0, bits)


@pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
def test_invalid_alpha(alpha):
    with pytest.raises(ConfigurationError):
        pot_levels(alpha, 4)


def test_scheme_parse():
    assert QuantScheme.parse("PoT") is QuantScheme.POT
    assert QuantScheme.parse("uniform") is QuantScheme.UNIFORM
    assert QuantScheme.POT.code == 1 and QuantScheme.UNIFORM.code == 0
    with pytest.raises(ConfigurationError):
        QuantScheme.parse("log")


# -------------------------
# normalize / clip / project
# -------------------------

def test_normalize_constant_weights_uses_sigma_floor(caplog):
    w_norm, mu, sigma = normalize([1.0, 1.0, 1.0, 1.0])
    np.testing.assert_array_equal(w_norm.data, np.zeros(4))
    assert mu == 1.0
    assert sigma == pytest.approx(1e-8)
    assert any("plancher" in r.message for r in caplog.records)


def test_normalize_two_points():
    w_norm, mu, sigma = normalize([0.0, 2.0])
    np.testing.assert_allclose(w_norm.data, [-1.0, 1.0])
    assert (mu, sigma) == (1.0, 1.0)


def test_normalize_statistics():
    w = np.random.default_rng(3).normal(0.7, 2.5, size=1000)
    w_norm, _, _ = normalize(w)
    x = w_norm.data.astype(np.float64)
    assert abs(x.mean()) < 1e-6
    assert abs(x.std() - 1.0) < 1e-6


def test_clip_examples():
    np.testing.assert_allclose(clip([1.7, -3.0, 0.5], 1.2).data, [1.2, -1.2, 0.5], rtol=1e-6)
    with pytest.raises(ConfigurationError):
        clip([0.1], 0.0)


def test_project_nearest_and_ties():
    lv = uniform_levels(1.0, 3)
    q = project([0.4, 0.5, -0.5], lv)
    np.testing.assert_allclose(q.values_normalized(), [1 / 3, 2 / 3, -2 / 3])


@pytest.mark.parametrize("alpha", [0.3, 0.7, 1.0, 1.1, 2.9, 3.0])
@pytest.mark.parametrize("bits", [2, 3, 4, 8])
@pytest.mark.parametrize("scheme", SCHEMES)
def test_exact_midpoints_round_away_from_zero(scheme, bits, alpha):
    v = levels_for(scheme, alpha, bits).values
    mids = (v[:-1] + v[1:]) / 2.0
    got = project(mids, levels_for(scheme, alpha, bits)).values_normalized()
    expected = np.where(mids >= 0, v[1:], v[:-1])
    np.testing.assert_array_equal(got, expected)


def test_project_fixed_point_on_pot_level():
    lv = pot_levels(1.0, 4)
    q = project([2.0 ** -3], lv)
    assert q.values_normalized()[0] == 2.0 ** -3


@pytest.mark.parametrize("bits", [2, 3, 4, 8])
@pytest.mark.parametrize("scheme", SCHEMES)
def test_projection_is_nearest_level(scheme, bits):
    lv = levels_for(scheme, 1.0, bits)
    x = np.random.default_rng(bits).uniform(-1.0, 1.0, size=10_000)
    got = project(x, lv).values_normalized()
    best = np.min(np.abs(x[:, None] - lv.values[None, :]), axis=1)
    assert np.all(np.abs(x - got) <= best + 1e-12)


# -------------------------
# quantize / dequantize / erreur
# -------------------------

def test_quantize_prenormalized_b2():
    q = quantize([0.0, 0.25, 1.0], frozen(bits=2, alpha=1.0))
    np.testing.assert_array_equal(q.values_normalized(), [0.0, 0.0, 1.0])
    err = quant_error([0.0, 0.25, 1.0], q)
    assert err.total == pytest.approx(0.0625)
    assert err.average == pytest.approx(0.0625 / 3)


def test_quantize_recovers_values_on_levels():
    lv = uniform_levels(2.0, 4)
    v = lv.values[[0, 3, 7, 9, 14]]
    w = 0.5 + 0.25 * v
    q = quantize(w, frozen(bits=4, alpha=2.0, mu=0.5, sigma=0.25))
    np.testing.assert_allclose(q.values_normalized(), v)
    assert quant_error(w, q).total == pytest.approx(0.0, abs=1e-12)


def test_quantize_stores_float32_statistics():
    w = np.random.default_rng(0).standard_normal(100) * 0.1 + 0.3
    q = quantize(w, QuantizerConfig(bits=6, alpha=2.7))
    for value in (q.config.mu, q.config.sigma, q.config.alpha):
        assert value == float(np.float32(value))


def test_dequantize_level_zero_gives_mu():
    cfg = frozen(bits=4, alpha=1.0, mu=0.75, sigma=2.0)
    zero = 7  # indice du niveau 0 parmi 15
    q = QuantizedTensor(codes=np.full((2, 3), zero, dtype=np.uint8), config=cfg, shape=(2, 3))
    np.testing.assert_allclose(dequantize(q).data, np.full((2, 3), 0.75))


def test_dequantize_identity_statistics():
    lv = pot_levels(1.0, 3)
    q = QuantizedTensor(codes=np.arange(7, dtype=np.uint8), config=frozen(QuantScheme.POT, 3, 1.0), shape=(7,))
    np.testing.assert_allclose(dequantize_array(q), lv.values)


def test_dequantize_rejects_out_of_range_code():
    q = QuantizedTensor(codes=np.array([3], dtype=np.uint8), config=frozen(bits=2, alpha=1.0), shape=(1,))
    with pytest.raises(CorruptionError):
        dequantize_array(q)


@pytest.mark.parametrize("scheme,bits", [(QuantScheme.UNIFORM, 2), (QuantScheme.UNIFORM, 8), (QuantScheme.POT, 3), (QuantScheme.POT, 5)])
def test_quantize_is_idempotent(scheme, bits):
    rng = np.random.default_rng(bits)
    for _ in range(250):
        w = rng.standard_normal(rng.integers(2, 40)) * rng.uniform(0.1, 2.0) + rng.uniform(-1, 1)
        q = quantize(w, QuantizerConfig(scheme=scheme, bits=bits, alpha=float(rng.uniform(0.5, 3.5))))
        again = quantize(dequantize_array(q), q.config)
        np.testing.assert_array_equal(again.codes, q.codes)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_error_decreases_with_bits(scheme):
    w = np.random.default_rng(11).standard_normal(100_000)
    errors = [quant_error(w, quantize(w, QuantizerConfig(scheme=scheme, bits=b, alpha=3.0))).average for b in (8, 4, 2)]
    assert errors[0] < errors[1] < errors[2]


# -------------------------
# STE
# -------------------------

def test_ste_alpha_sign_branch():
    assert ste_backward_alpha([1.5], [1.0], 1.0, [1.0]) == pytest.approx(1.0)
    assert ste_backward_alpha([-1.5], [-1.0], 1.0, [1.0]) == pytest.approx(-1.0)


def test_ste_alpha_interior_branch():
    q = project([0.4], uniform_levels(1.0, 3))
    assert ste_backward_alpha([0.4], q, 1.0, [1.0]) == pytest.approx(1 / 3 - 0.4)


def test_ste_alpha_on_level_is_zero():
    assert ste_backward_alpha([2 / 3], [2 / 3], 1.0, [1.0]) == pytest.approx(0.0)


def test_ste_alpha_rejects_non_positive_alpha():
    with pytest.raises(ConfigurationError):
        ste_backward_alpha([0.1], [0.0], 0.0, [1.0])


@pytest.mark.parametrize("scheme", SCHEMES)
def test_ste_alpha_matches_finite_differences(scheme):
    """Dérivée de clip(W, α) + (α/α0)·(Ŵ(α0) − clip(W, α0)) en α0 : les deux branches."""
    rng = np.random.default_rng(5)
    alpha0, step = 1.3, 1e-4
    w = rng.uniform(-2.5, 2.5, size=3000)
    w = w[np.abs(np.abs(w) - alpha0) > 1e-3][:1000]
    g = rng.standard_normal(w.size)
    w_hat0 = project(np.clip(w, -alpha0, alpha0), levels_for(scheme, alpha0, 4)).values_normalized()

    def surrogate(a: float) -> np.ndarray:
        return np.clip(w, -a, a) + (a / alpha0) * (w_hat0 - np.clip(w, -alpha0, alpha0))

    fd = (surrogate(alpha0 + step) - surrogate(alpha0 - step)) / (2 * step)
    for i in range(w.size):
        got = ste_backward_alpha(w[i:i + 1], w_hat0[i:i + 1], alpha0, g[i:i + 1])
        assert got == pytest.approx(g[i] * fd[i], abs=1e-3)
    assert np.any(np.abs(w) > alpha0) and np.any(np.abs(w) < alpha0)


def test_ste_w_is_identity():
    np.testing.assert_array_equal(ste_backward_w([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ste_backward_w(np.zeros(2)), np.zeros(2))


def test_master_weight_sgd_step_even_when_clipped():
    w = Tensor(np.array([5.0, 0.1, -4.0]), requires_grad=True)
    alpha = Tensor(np.asarray(1.0), requires_grad=True)
    upstream = np.array([0.5, -1.0, 2.0])
    with Tape() as tape:
        w_hat, _ = fake_quantize(w, alpha, QuantScheme.UNIFORM, 4)
        loss = ops.sum(ops.mul(w_hat, Tensor(upstream)))
    tape.backward(loss)
    lr = 0.1
    np.testing.assert_allclose(w.data - lr * w.grad, np.array([5.0, 0.1, -4.0]) - lr * upstream, rtol=1e-6)


def test_fake_quantize_forward_on_levels_and_alpha_grad():
    rng = np.random.default_rng(9)
    w = Tensor(rng.standard_normal((4, 5)) * 0.2 + 0.1, requires_grad=True)
    alpha = Tensor(np.asarray(1.5), requires_grad=True)
    g = rng.standard_normal((4, 5))
    with Tape() as tape:
        w_hat, q = fake_quantize(w, alpha, QuantScheme.POT, 4)
        loss = ops.sum(ops.mul(w_hat, Tensor(g)))
    tape.backward(loss)
    levels = q.config.sigma * q.levels.values + q.config.mu
    assert np.all(np.min(np.abs(w_hat.data[..., None] - levels), axis=-1) < 1e-5)
    w_norm = (w.data.astype(np.float64) - q.config.mu) / q.config.sigma
    expected = ste_backward_alpha(w_norm, q, q.config.alpha, q.config.sigma * g)
    assert alpha.grad.item() == pytest.approx(expected, rel=1e-4, abs=1e-6)
