import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quzo.errors import InputError, IntegrityError, RunError
from quzo.estimators import (Perturbation, densify, estimate_many, estimate_qrge1, estimate_qrge2,
                             estimate_rge, perturbation_scheme, quantize_perturbation_pair,
                             sample_perturbation, sensitivity)
from quzo.models import MLP, LinearProbe, QuadraticProbe
from quzo.quant import QuantFormat, QuantScheme, dequantize
from quzo.rng import RngStream

INT4 = QuantFormat("INT", 4)
INT8 = QuantFormat("INT", 8)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_perturbation_moments():
    u = sample_perturbation(RngStream(0), 200_000)
    assert abs(u.mean()) < 4 / np.sqrt(u.size)
    assert abs(u.var() - 1) < 4 * np.sqrt(2 / u.size)
    assert np.array_equal(u, sample_perturbation(RngStream(0), 200_000))


def test_perturbation_streams_independent():
    a = sample_perturbation(RngStream(0).at(query=0), 100_000)
    b = sample_perturbation(RngStream(0).at(query=1), 100_000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(a.size)


def test_perturbation_dimension_checked():
    with pytest.raises(InputError):
        sample_perturbation(RngStream(0), 0)


def test_pair_on_grid_and_within_one_step():
    u = sample_perturbation(RngStream(3), 500)
    scheme = perturbation_scheme(u, INT4)
    q1, q2 = quantize_perturbation_pair(u, scheme, RngStream(3))
    for q in (q1, q2):
        assert np.all(np.abs(q.codes) <= 7)
        assert np.all(np.abs(dequantize(q) - u) < scheme.scale + 1e-12)
    assert not np.array_equal(q1.codes, q2.codes)


def test_pair_of_on_grid_vector_is_exact():
    u = np.array([-3.0, 0.0, 2.0, 7.0])
    q1, q2 = quantize_perturbation_pair(u, QuantScheme(INT4, 1.0, rounding="stochastic"), RngStream(2))
    assert np.array_equal(dequantize(q1), u) and np.array_equal(dequantize(q2), u)


def test_pair_of_zero_vector():
    q1, q2 = quantize_perturbation_pair(np.zeros(5), INT4, RngStream(0))
    assert np.all(q1.codes == 0) and np.all(q2.codes == 0)


def test_second_moments_against_bernoulli_enumeration():
    # u on a unit grid so p = frac(u); enumerate the two outcomes exactly
    g = np.random.default_rng(0)
    u = g.uniform(-5, 5, 400)
    scheme = QuantScheme(INT4, 1.0, rounding="stochastic")
    lo = np.floor(u)
    p = u - lo
    e_sq = (1 - p) * lo ** 2 + p * (lo + 1) ** 2
    e_cross = u ** 2
    reps = 400
    sq = np.zeros_like(u)
    cross = np.zeros_like(u)
    for k in range(reps):
        q1, q2 = quantize_perturbation_pair(u, scheme, RngStream(1).at(query=k))
        a, b = dequantize(q1), dequantize(q2)
        sq += a * a / reps
        cross += a * b / reps
    # aggregate over 400 coordinates x 400 draws
    assert abs(sq.mean() - e_sq.mean()) < 0.05
    assert abs(cross.mean() - e_cross.mean()) < 0.05
    assert e_sq.mean() - e_cross.mean() > 0.15  # the variance term Q-RGE1 picks up
    assert abs(np.mean(sq - cross) - np.mean(p * (1 - p))) < 0.02


def test_scalar_half_second_moments():
    scheme = QuantScheme(INT8, 1.0, rounding="stochastic")
    u = np.full(1_000_000, 0.5)
    q1, q2 = quantize_perturbation_pair(u, scheme, RngStream(5))
    a, b = dequantize(q1), dequantize(q2)
    tol = 4 * np.sqrt(0.1875 / u.size)
    assert abs(np.mean(a * a) - 0.5) < 4 * np.sqrt(0.25 / u.size)
    assert abs(np.mean(a * b) - 0.25) < tol


def test_roundings_conditionally_independent():
    u = sample_perturbation(RngStream(9), 100_000)
    q1, q2 = quantize_perturbation_pair(u, INT4, RngStream(9))
    e1, e2 = dequantize(q1) - u, dequantize(q2) - u
    assert abs(np.corrcoef(e1, e2)[0, 1]) < 4 / np.sqrt(u.size)
    assert abs(e1.mean()) < 4 * np.std(e1) / np.sqrt(u.size)


@given(st.floats(-3, 3), st.floats(1e-4, 1), st.integers(0, 2 ** 32))
def test_sensitivity_is_odd_in_probe(w, eps, seed):
    f = lambda th: float(np.sum(np.sin(th) + th ** 3))
    theta = np.array([w, 0.5 * w, 1.0])
    p = np.random.default_rng(seed).standard_normal(3)
    assert sensitivity(f, theta, -p, eps) == -sensitivity(f, theta, p, eps)


def test_sensitivity_nonfinite_raises():
    with pytest.raises(RunError):
        sensitivity(lambda th: np.inf if th[0] > 0 else 0.0, np.zeros(1), np.ones(1), 0.1)


@pytest.mark.parametrize("eps", [1e-4, 1e-2, 1.0])
def test_linear_loss_sensitivity_is_exact(eps):
    c = np.linspace(-1, 1, 16)
    model = LinearProbe(np.zeros(16), c)
    est = estimate_qrge2(model, None, 20, eps, INT4, seed=4, compressed=True)
    for q in est.queries:
        _, u1, _, _ = Perturbation(q.seed_path, eps, INT4, model.layout()).dense()
        assert q.mu == pytest.approx(c @ u1, rel=1e-9, abs=1e-12)


def test_sensitivity_converges_quadratically_in_epsilon():
    f = lambda th: float(np.sum(np.exp(th)))
    theta = np.array([0.1, -0.4, 0.7])
    p = np.array([1.0, 2.0, -1.0])
    exact = float(np.exp(theta) @ p)
    errs = [abs(sensitivity(f, theta, p, e) - exact) for e in (1e-1, 5e-2, 2.5e-2)]
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_rge_quadratic_unbiased():
    # L = 0.5 |w|^2, gradient w
    w = np.array([1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.5])
    model = QuadraticProbe(w, np.zeros(8))
    est = estimate_rge(model, None, 100_000, 1e-3, seed=0)
    assert rel(est.vector, w) < 0.03


def test_lossless_limit_matches_rge():
    model = QuadraticProbe(np.zeros(6), np.arange(6.0))
    out = estimate_many(model, None, 50, 1e-3, None, 0, kinds=("RGE", "Q-RGE1", "Q-RGE2"))
    assert np.array_equal(out["RGE"].vector, out["Q-RGE2"].vector)
    assert np.array_equal(out["RGE"].vector, out["Q-RGE1"].vector)
    fine = estimate_many(model, None, 50, 1e-3, QuantFormat("INT", 24), 0, kinds=("RGE", "Q-RGE2"))
    assert rel(fine["Q-RGE2"].vector, fine["RGE"].vector) < 1e-5


def test_zero_gradient_gives_zero_estimate():
    model = QuadraticProbe(np.zeros(8), np.zeros(8))
    for kind in ("RGE", "Q-RGE1", "Q-RGE2"):
        est = estimate_many(model, None, 10, 1e-2, INT4, 0, kinds=(kind,))[kind]
        assert np.all(est.vector == 0)


def test_densify_is_bit_identical():
    m = MLP([3, 4, 2], seed=0)
    batch = (np.random.default_rng(0).standard_normal((8, 3)), np.arange(8) % 2)
    for kind in ("RGE", "Q-RGE1", "Q-RGE2"):
        dense = estimate_many(m, batch, 5, 1e-2, INT8, 3, kinds=(kind,))[kind]
        comp = estimate_many(m, batch, 5, 1e-2, INT8, 3, kinds=(kind,), compressed=True)[kind]
        assert comp.compressed and len(comp.queries) == 5
        assert np.array_equal(densify(comp, m.num_params), dense.vector)
        assert dense.vector.size == m.num_params
    with pytest.raises(IntegrityError):
        densify(comp, m.num_params + 1)


def test_estimators_share_probe():
    model = QuadraticProbe(np.zeros(5), np.ones(5))
    a = estimate_qrge1(model, None, 8, 1e-3, INT4, 1, compressed=True)
    b = estimate_qrge2(model, None, 8, 1e-3, INT4, 1, compressed=True)
    assert [q.mu for q in a.queries] == [q.mu for q in b.queries]


def test_estimator_argument_checks():
    model = QuadraticProbe(np.zeros(2), np.ones(2))
    with pytest.raises(InputError):
        estimate_rge(model, None, 0, 1e-3, 0)
    with pytest.raises(InputError):
        estimate_rge(model, None, 1, 0.0, 0)
    with pytest.raises(InputError):
        estimate_many(model, None, 1, 1e-3, INT4, 0, kinds=("SPSA",))


def test_densify_single_query():
    from quzo.estimators import GradientEstimate, ZoQuery
    # d=1: max-abs calibration puts u on the grid endpoint, so u2 = u exactly
    path = RngStream(6).at(query=0)
    u = sample_perturbation(path, 1)
    for mu in (0.0, 2.0):
        est = GradientEstimate("Q-RGE2", 1, 1e-3, INT8, [("w", (1,))], queries=[ZoQuery(mu, path)])
        assert np.array_equal(densify(est, 1), mu * u)


def test_mu_zero_gives_zero_contribution():
    # constant loss: every query has mu = 0
    model = LinearProbe(np.zeros(4), np.zeros(4))
    est = estimate_qrge2(model, None, 7, 1e-3, INT4, 0)
    assert np.all(est.vector == 0)


@pytest.fixture(scope="module")
def quadratic_sweep():
    g = np.random.default_rng(0)
    model = QuadraticProbe(np.zeros(64), g.standard_normal(64))
    out = estimate_many(model, None, 100_000, 1e-3, INT4, 0, kinds=("RGE", "Q-RGE1", "Q-RGE2"))
    return {k: rel(v.vector, model.gradient()) for k, v in out.items()}


def test_qrge2_error_matches_rge(quadratic_sweep):
    # sqrt(d/N) is the Monte Carlo scale of either error
    tol = 2 * np.sqrt(64 / 100_000)
    assert quadratic_sweep["Q-RGE2"] <= quadratic_sweep["RGE"] + tol


def test_qrge1_error_exceeds_qrge2(quadratic_sweep):
    assert quadratic_sweep["Q-RGE1"] > quadratic_sweep["Q-RGE2"]


@pytest.mark.xfail(strict=True, reason="bias gap at d=64, N=1e5 is about 1.5x; noise is comparable to the bias")
def test_qrge1_error_at_least_twice_qrge2(quadratic_sweep):
    assert quadratic_sweep["Q-RGE1"] >= 2 * quadratic_sweep["Q-RGE2"]
