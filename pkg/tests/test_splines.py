import numpy as np
import pytest

from mlsurv.errors import ModelSpecError
from mlsurv.splines import KnotVector, SplineBasis, place_default_knots, rcs_deriv, rcs_eval


def test_df1_basis_is_identity():
    kv = KnotVector(-1.0, (), 2.0)
    for x in (-3.0, 0.0, 0.7, 5.0):
        assert rcs_eval(x, kv) == pytest.approx([x])
        assert rcs_deriv(x, kv) == pytest.approx([1.0])


def test_cubic_terms_vanish_below_lowest_knot():
    kv = KnotVector(0.0, (0.4, 0.7), 1.0)
    vals = rcs_eval(-0.5, kv)
    assert vals[0] == -0.5
    assert np.all(vals[1:] == 0.0)


def test_symbolic_expansion_at_midpoint():
    # knots {0, 0.5, 1}: lam = 0.5, so
    # v2(0.75) = 0.25^3 - 0.5 * 0.75^3 - 0 = -0.1953125
    kv = KnotVector(0.0, (0.5,), 1.0)
    assert rcs_eval(0.75, kv)[1] == pytest.approx(-0.1953125, abs=1e-12)


def test_derivative_matches_finite_differences():
    rng = np.random.default_rng(7)
    kv = KnotVector(-0.5, (0.1, 0.6, 1.1), 2.0)  # df = 4
    for x in rng.uniform(-1.5, 3.0, 40):
        step = 1e-6
        fd = (rcs_eval(x + step, kv) - rcs_eval(x - step, kv)) / (2 * step)
        an = rcs_deriv(x, kv)
        assert np.allclose(fd, an, rtol=1e-6, atol=1e-8)


def test_linear_beyond_boundaries():
    kv = KnotVector(0.0, (0.3, 0.8), 1.5)
    # derivative constant in x outside the boundary knots
    d_hi = rcs_deriv(2.0, kv)
    assert np.allclose(rcs_deriv(5.0, kv), d_hi)
    d_lo = rcs_deriv(-1.0, kv)
    assert np.allclose(rcs_deriv(-4.0, kv), d_lo)
    # second derivative zero outside (finite differences of the first)
    for x in (-2.0, 3.0):
        sd = (rcs_deriv(x + 1e-5, kv) - rcs_deriv(x - 1e-5, kv)) / 2e-5
        assert np.allclose(sd, 0.0, atol=1e-6)


def test_c2_continuity_at_knots():
    kv = KnotVector(0.0, (0.3, 0.8), 1.5)
    eps = 1e-7
    for k in (0.0, 0.3, 0.8, 1.5):
        assert np.allclose(rcs_eval(k - eps, kv), rcs_eval(k + eps, kv), atol=1e-12)
        assert np.allclose(rcs_deriv(k - eps, kv), rcs_deriv(k + eps, kv), atol=1e-5)
        sd_lo = (rcs_deriv(k - eps, kv) - rcs_deriv(k - 3 * eps, kv)) / (2 * eps)
        sd_hi = (rcs_deriv(k + 3 * eps, kv) - rcs_deriv(k + eps, kv)) / (2 * eps)
        assert np.allclose(sd_lo, sd_hi, atol=1e-4)


class TestDefaultKnots:
    def test_df1_no_interior(self):
        kv = place_default_knots([0.5, 1.7, 3.1], 1)
        assert kv.interior == ()
        assert kv.boundary_low == 0.5
        assert kv.boundary_high == 3.1

    def test_nearest_rank_oracle(self):
        rng = np.random.default_rng(11)
        values = rng.normal(1.0, 2.0, 58)
        for df in (2, 3, 4, 5):
            kv = place_default_knots(values, df)
            srt = np.sort(values)
            expect = [srt[int(np.ceil(k / df * srt.size)) - 1] for k in range(1, df)]
            assert list(kv.interior) == pytest.approx(expect)
            assert kv.boundary_low == srt[0]
            assert kv.boundary_high == srt[-1]

    def test_catheter_centiles(self, catheter):
        t = np.asarray(catheter.columns["time"])
        d = np.asarray(catheter.columns["infect"])
        logs = np.sort(np.log(t[d == 1.0]))
        kv = place_default_knots(np.log(t[d == 1.0]), 3)
        n = logs.size
        assert kv.interior[0] == logs[int(np.ceil(n / 3)) - 1]
        assert kv.interior[1] == logs[int(np.ceil(2 * n / 3)) - 1]

    def test_df_out_of_range(self):
        with pytest.raises(ModelSpecError, match="between 1 and 10"):
            place_default_knots([1.0, 2.0], 12)
        with pytest.raises(ModelSpecError, match="between 1 and 10"):
            place_default_knots([1.0, 2.0], 0)

    def test_no_events_rejected(self):
        with pytest.raises(ModelSpecError, match="uncensored"):
            place_default_knots([], 3)

    def test_duplicate_knots_collapse_with_warning(self):
        values = [1.0] * 30 + [2.0]
        with pytest.warns(UserWarning, match="collapsed"):
            kv = place_default_knots(values, 4)
        assert kv.df < 4


class TestOrthogonalization:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(3)
        sample = rng.normal(2.0, 1.3, 200)
        kv = place_default_knots(sample, 4)
        basis = SplineBasis.build(kv, sample_x=sample, orthogonalize=True)
        cols = basis.eval(sample)
        assert np.abs(cols.mean(axis=0)).max() < 1e-8
        gram = cols.T @ cols / sample.size
        assert np.abs(gram - np.eye(4)).max() < 1e-8

    def test_derivative_transforms_consistently(self):
        rng = np.random.default_rng(4)
        sample = rng.normal(0.0, 1.0, 100)
        kv = place_default_knots(sample, 3)
        basis = SplineBasis.build(kv, sample_x=sample, orthogonalize=True)
        for x in (-0.5, 0.2, 1.4):
            step = 1e-6
            fd = (basis.eval(x + step) - basis.eval(x - step)) / (2 * step)
            assert np.allclose(fd, basis.deriv(x), rtol=1e-5, atol=1e-8)

    def test_span_unchanged(self):
        # any raw-basis curve is reproducible in the orthogonalized basis
        rng = np.random.default_rng(5)
        sample = rng.normal(0.0, 1.0, 150)
        kv = place_default_knots(sample, 3)
        raw = SplineBasis.build(kv)
        orth = SplineBasis.build(kv, sample_x=sample, orthogonalize=True)
        coefs = rng.normal(size=3)
        target = raw.eval(sample) @ coefs
        aug = np.column_stack([np.ones(sample.size), orth.eval(sample)])
        fitted = aug @ np.linalg.lstsq(aug, target, rcond=None)[0]
        assert np.abs(fitted - target).max() < 1e-8

    def test_requires_sample(self):
        kv = KnotVector(0.0, (), 1.0)
        with pytest.raises(ModelSpecError):
            SplineBasis.build(kv, orthogonalize=True)


def test_knots_must_ascend():
    with pytest.raises(ModelSpecError):
        KnotVector(1.0, (0.5,), 2.0)
    with pytest.raises(ModelSpecError):
        KnotVector(0.0, (), 0.0)
