import math
import warnings

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad

from evtrisk.errors import InputError
from evtrisk.mc import (
    McDesign,
    _simulate,
    named_design,
    run_experiment,
    simulate_dgp,
    summarize,
    t_quantile_std,
    t_tail_mean_std,
    true_risk,
    variance_fn,
)

DESIGN = McDesign(n=400, variant="h1", theta=0.0, v=6, reps=6, seed=5,
                  a_levels=(0.95,))


def test_design_validation():
    with pytest.raises(InputError):
        McDesign(n=100)
    with pytest.raises(InputError):
        McDesign(v=2)
    with pytest.raises(InputError):
        McDesign(variant="h3")
    with pytest.raises(InputError):
        McDesign(a_levels=(1.2,))
    assert McDesign(v=3).k0 == pytest.approx(-1 / 3)


def test_zero_innovations_orbit_converges():
    design = McDesign(n=500, variant="h1", theta=0.0, v=3, reps=1, seed=0)
    series = simulate_dgp(design, innovations=np.zeros(1500))
    # deterministic recursion y <- sin(0.5 y) contracts to the fixed point 0
    assert abs(series.values[-1]) < 1e-10


def test_innovations_standardized():
    design = McDesign(n=100_000, variant="h1", theta=0.0, v=6, reps=1, seed=9)
    path = _simulate(design, 0)
    assert path.eps.var() == pytest.approx(1.0, abs=0.03)
    assert abs(path.eps.mean()) < 0.02


def test_v3_heavier_than_v6():
    base = dict(n=50_000, variant="h1", theta=0.0, reps=1, seed=31)
    heavy = _simulate(McDesign(v=3, **base), 0)
    light = _simulate(McDesign(v=6, **base), 0)
    assert stats.kurtosis(heavy.y) > stats.kurtosis(light.y)


def test_variance_recursion_and_floor():
    design = McDesign(n=300, variant="h2", theta=0.5, v=6, reps=1, seed=2)
    path = _simulate(design, 0)
    assert np.all(path.h >= 1e-8)
    # h(t) = h2(y_{t-1}) + theta h(t-1) checked on the recorded path
    rebuilt = variance_fn(path.y[:-1], "h2") + 0.5 * path.h[:-1]
    np.testing.assert_allclose(path.h[1:], rebuilt, rtol=1e-12)


# ---------------------------------------------------------------- truths


def test_true_risk_median_is_mean_function():
    design = McDesign(n=400, v=6)
    q, _ = true_risk(design, x=0.7, a=0.5)
    assert q == pytest.approx(math.sin(0.35))


def test_t_quantile_matches_numeric_inversion():
    for v, a in ((6, 0.99), (3, 0.95)):
        lo, hi = 0.0, 50.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if stats.t.cdf(mid, v) < a:
                lo = mid
            else:
                hi = mid
        expected = mid / math.sqrt(v / (v - 2))
        assert t_quantile_std(a, v) == pytest.approx(expected, abs=1e-8)


def test_tail_mean_matches_quadrature():
    for v, a in ((6, 0.99), (3, 0.95), (6, 0.999)):
        scale = math.sqrt(v / (v - 2))
        c = stats.t.ppf(a, v)
        raw, _ = quad(lambda x: x * stats.t.pdf(x, v), c, np.inf, limit=300)
        assert t_tail_mean_std(a, v) == pytest.approx(raw / (1 - a) / scale, rel=1e-8)


def test_tail_mean_above_quantile():
    for v in (3, 6):
        for a in (0.5, 0.9, 0.99, 0.999):
            assert t_tail_mean_std(a, v) >= t_quantile_std(a, v)


def test_true_risk_theta_needs_path_variance():
    design = McDesign(n=400, theta=0.5, v=6)
    with pytest.raises(InputError):
        true_risk(design, x=0.0, a=0.99)
    q, e = true_risk(design, x=0.0, a=0.99, h_next=1.7)
    assert e > q


# ---------------------------------------------------------------- aggregation


def test_summarize_single_replication():
    b, s, r, used = summarize(np.array([0.37]))
    assert b == pytest.approx(0.37)
    assert s == 0.0
    assert r == pytest.approx(0.37)
    assert used == 1


def test_summarize_rmse_identity():
    rng = np.random.default_rng(4)
    errors = rng.normal(0.2, 1.0, size=400)
    b, s, r, _ = summarize(errors, trim=0.0)
    assert r**2 == pytest.approx(b**2 + s**2, abs=1e-9)
    assert r == pytest.approx(math.sqrt(np.mean(errors**2)), abs=1e-12)


def test_trimming_robustness():
    rng = np.random.default_rng(6)
    errors = rng.normal(size=200)
    b0, *_ = summarize(errors)
    b0_raw = errors.mean()
    spiked = np.concatenate([errors, [500.0, 600.0]])
    b1, *_ = summarize(spiked)
    b1_raw = spiked.mean()
    assert abs(b1 - b0) < abs(b1_raw - b0_raw)


# ---------------------------------------------------------------- experiment


@pytest.fixture(scope="module")
def small_result():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_experiment(DESIGN, threads=1)


def test_experiment_rows_complete(small_result):
    targets = {(row.target, row.estimator, row.a) for row in small_result.rows}
    assert ("sigma_N", "pipeline", None) in targets
    assert ("k0", "oracle_bc", None) in targets
    assert ("cvar", "pipeline_bc", 0.95) in targets
    assert ("ces", "oracle", 0.95) in targets
    for row in small_result.rows:
        assert math.isfinite(row.B)
        assert row.rel_R >= 1.0 or math.isnan(row.rel_R)
        if row.estimator.endswith("_bc") and row.target in ("cvar", "ces"):
            assert row.ecp is not None and 0.0 <= row.ecp <= 1.0


def test_experiment_reproducible_across_threads(small_result):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        again = run_experiment(DESIGN, threads=2)
    assert len(again.rows) == len(small_result.rows)
    for a, b in zip(small_result.rows, again.rows):
        assert (a.target, a.estimator, a.a) == (b.target, b.estimator, b.a)
        assert a.B == b.B and a.S == b.S and a.R == b.R and a.ecp == b.ecp
    for level in DESIGN.a_levels:
        np.testing.assert_array_equal(small_result.truths[level], again.truths[level])


def test_named_designs():
    design = named_design("table1", reps=7, seed=3)
    assert design.v == 3 and design.reps == 7 and design.seed == 3
    with pytest.raises(InputError):
        named_design("table9", reps=1, seed=0)


def test_simulate_reproducible_per_rep():
    design = McDesign(n=300, v=6, reps=2, seed=77)
    a = _simulate(design, 1)
    b = _simulate(design, 1)
    np.testing.assert_array_equal(a.y, b.y)
    c = _simulate(design, 0)
    assert not np.array_equal(a.y, c.y)


def test_theta_half_misspecified_design_runs():
    # the estimator assumes theta = 0; the harness still scores it against
    # the path truth when theta = 0.5
    design = McDesign(n=400, variant="h1", theta=0.5, v=3, reps=6, seed=22,
                      a_levels=(0.95,))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = run_experiment(design, threads=1)
    row = {(r.target, r.estimator, r.a): r for r in result.rows}[("cvar", "pipeline", 0.95)]
    assert math.isfinite(row.B)
    path = _simulate(design, 0)
    q_true, e_true = true_risk(design, float(path.y[-1]), 0.95, h_next=path.h_next)
    assert e_true > q_true
