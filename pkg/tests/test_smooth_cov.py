import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynspca.errors import DegenerateWindow, DimensionError, WrongDesign
from dynspca.kernel import KernelSpec, local_linear_weights
from dynspca.panel import Design, PanelDataset
from dynspca.smooth_cov import (
    CovarianceSmoother,
    eigengap_diagnostic,
    smooth_cov_common,
    smooth_cov_pooled,
    smooth_mean,
)

from conftest import random_symmetric


def irregular_panel(rng, n, p, lo=3, hi=6):
    times = [np.sort(rng.uniform(0, 1, rng.integers(lo, hi + 1))) for _ in range(n)]
    values = [rng.standard_normal((t.size, p)) for t in times]
    return PanelDataset(times, values)


def common_panel(rng, n, p, m):
    grid = 2.0 * np.arange(1, m + 1) / (2 * m + 1)
    return PanelDataset([grid] * n, [rng.standard_normal((m, p)) for _ in range(n)])


def pooled_weights(data, t, spec):
    return local_linear_weights(data.flat_times, t, spec).weights


def test_mean_matches_extended_precision_loop(rng):
    grid = np.array([0.2, 0.4, 0.6, 0.8])
    data = PanelDataset([grid] * 3, [rng.standard_normal((4, 5)) for _ in range(3)], design="irregular")
    spec = KernelSpec(0.5)
    w = pooled_weights(data, 0.45, spec).astype(np.longdouble)
    acc = np.zeros(5, dtype=np.longdouble)
    k = 0
    for i in range(data.n):
        for l in range(data.times[i].size):
            acc += w[k] * data.values[i][l].astype(np.longdouble)
            k += 1
    assert np.allclose(smooth_mean(data, 0.45, spec), acc.astype(float), atol=1e-13)


def test_pooled_matches_double_loop(rng):
    data = irregular_panel(rng, 5, 4)
    spec = KernelSpec(0.4)
    for center in (True, False):
        cov = smooth_cov_pooled(data, 0.5, spec, center=center)
        w = pooled_weights(data, 0.5, spec)
        S = np.zeros((4, 4))
        mu = np.zeros(4)
        k = 0
        for i in range(data.n):
            for l in range(data.times[i].size):
                y = data.values[i][l]
                S += w[k] * np.outer(y, y)
                mu += w[k] * y
                k += 1
        if center:
            S -= np.outer(mu, mu)
        assert np.allclose(cov.S, S, atol=1e-12, rtol=0)
        assert np.allclose(cov.mean, mu if center else 0.0, atol=1e-12)


def test_common_matches_per_time_covariances(rng):
    data = common_panel(rng, 10, 6, 15)
    spec = KernelSpec(0.3)
    t = 0.37
    cov = smooth_cov_common(data, t, spec)
    w = local_linear_weights(data.grid, t, spec).weights
    S = np.zeros((6, 6))
    for l in range(15):
        Y = np.array([data.values[i][l] for i in range(10)])
        Yc = Y - Y.mean(axis=0)
        S += w[l] * (Yc.T @ Yc) / 10
    assert np.allclose(cov.S, S, atol=1e-12, rtol=0)


def test_common_two_subjects_opposite():
    grid = np.linspace(0.1, 0.9, 6)
    v = np.array([1.0, -2.0, 0.5])
    data = PanelDataset([grid, grid], [np.tile(v, (6, 1)), np.tile(-v, (6, 1))])
    S = smooth_cov_common(data, 0.5, KernelSpec(0.4)).S
    assert np.allclose(S, np.outer(v, v), atol=1e-12)


def test_single_atom_weights_give_sample_covariance(rng):
    data = common_panel(rng, 8, 3, 5)
    grid = data.grid
    # h below the grid spacing with t on a grid point: a one-point window is degenerate
    with pytest.raises(DegenerateWindow):
        smooth_cov_common(data, grid[2], KernelSpec(0.05))


def test_uncentered_constant_vector():
    v = np.array([1.0, 2.0, -1.0])
    times = [np.array([0.1, 0.5, 0.9]), np.array([0.3, 0.7])]
    data = PanelDataset(times, [np.tile(v, (3, 1)), np.tile(v, (2, 1))])
    cov = smooth_cov_pooled(data, 0.5, KernelSpec(0.6), center=False)
    assert np.allclose(cov.S, np.outer(v, v), atol=1e-12)
    assert np.allclose(cov.mean, 0.0)


def test_constant_mean():
    c = 2.5
    times = [np.array([0.1, 0.5, 0.9]), np.array([0.3, 0.7])]
    data = PanelDataset(times, [np.full((3, 4), c), np.full((2, 4), c)])
    assert np.allclose(smooth_mean(data, 0.2, KernelSpec(0.5)), c)


@given(st.floats(0, 1), st.floats(0.1, 0.8))
def test_affine_mean_reproduced(t, h):
    a, b = np.array([1.0, -2.0, 0.3]), np.array([0.5, 3.0, -1.0])
    grid = np.linspace(0, 1, 11)
    data = PanelDataset([grid, grid[::2]], [a + np.outer(grid, b), a + np.outer(grid[::2], b)],
                        design="irregular")
    try:
        mu = smooth_mean(data, t, KernelSpec(h))
    except DegenerateWindow:
        return
    assert np.allclose(mu, a + b * t, atol=1e-10)


def test_one_point_window_degenerate():
    data = PanelDataset([np.array([0.5]), np.array([0.0, 1.0])],
                        [np.ones((1, 2)), np.ones((2, 2))])
    with pytest.raises(DegenerateWindow):
        smooth_cov_pooled(data, 0.5, KernelSpec(0.1))


def test_common_requires_common_design(rng):
    data = irregular_panel(rng, 4, 3)
    with pytest.raises(WrongDesign):
        smooth_cov_common(data, 0.5, KernelSpec(0.3))


def test_exact_symmetry(rng):
    data = irregular_panel(rng, 20, 7)
    for method in ("pooled",):
        S = CovarianceSmoother(data, KernelSpec(0.3), method).covariance(0.4).S
        assert np.array_equal(S, S.T)
    S = smooth_cov_common(common_panel(rng, 9, 7, 12), 0.4, KernelSpec(0.3)).S
    assert np.array_equal(S, S.T)


def test_single_shared_time_agreement(rng):
    # pooled centered and common estimators coincide when the panel has two
    # shared times equally weighted: each reduces to averaged sample covariances
    grid = np.array([0.4, 0.6])
    vals = [rng.standard_normal((2, 3)) for _ in range(6)]
    data = PanelDataset([grid] * 6, vals)
    Sc = smooth_cov_common(data, 0.5, KernelSpec(0.3)).S
    w = local_linear_weights(grid, 0.5, KernelSpec(0.3)).weights
    assert np.allclose(w, 0.5)
    # direct: average of per-time 1/n covariances
    Y = np.stack(vals)
    direct = sum(w[l] * np.cov(Y[:, l, :].T, bias=True) for l in range(2))
    assert np.allclose(Sc, direct, atol=1e-12)


def test_permutation_equivariance(rng):
    data = irregular_panel(rng, 12, 5)
    perm = rng.permutation(5)
    permuted = PanelDataset(data.times, [y[:, perm] for y in data.values])
    for center in (True, False):
        S = smooth_cov_pooled(data, 0.6, KernelSpec(0.35), center).S
        Sp = smooth_cov_pooled(permuted, 0.6, KernelSpec(0.35), center).S
        assert np.allclose(Sp, S[np.ix_(perm, perm)], atol=1e-13)


@pytest.mark.parametrize("method", ["pooled", "common"])
def test_leave_one_out_matches_recompute(rng, method):
    data = common_panel(rng, 7, 4, 9) if method == "common" else irregular_panel(rng, 7, 4, 5, 8)
    sm = CovarianceSmoother(data, KernelSpec(0.35), method)
    for i, S_loo in sm.leave_one_out(0.5):
        rest = data.subset([j for j in range(data.n) if j != i])
        try:
            ref = CovarianceSmoother(rest, KernelSpec(0.35), method).matrix(0.5)[0]
        except DegenerateWindow:
            assert S_loo is None
            continue
        assert np.allclose(S_loo, ref, atol=1e-11)


def test_with_bandwidth_shares_data(rng):
    data = irregular_panel(rng, 6, 3)
    sm = CovarianceSmoother(data, KernelSpec(0.3))
    other = sm.with_bandwidth(0.5)
    assert other.kernel.bandwidth == 0.5 and sm.kernel.bandwidth == 0.3
    ref = CovarianceSmoother(data, KernelSpec(0.5)).matrix(0.5)[0]
    assert np.allclose(other.matrix(0.5)[0], ref)


def test_eigengap_examples(rng):
    assert eigengap_diagnostic(np.diag([3.0, 2.0, 1.0]), 1) == pytest.approx(1.0)
    assert eigengap_diagnostic(np.eye(4), 2) == pytest.approx(0.0, abs=1e-14)
    S = random_symmetric(rng, 8)
    ev = np.sort(np.linalg.eigvals(S).real)[::-1]
    assert eigengap_diagnostic(S, 3) == pytest.approx(ev[2] - ev[3], abs=1e-10)
    with pytest.raises(DimensionError):
        eigengap_diagnostic(S, 8)


def test_diagnostics_fields(rng):
    data = irregular_panel(rng, 10, 4)
    cov = CovarianceSmoother(data, KernelSpec(0.4)).covariance(0.5, d=2)
    diag = cov.diagnostics()
    assert len(diag["top_eigenvalues"]) == 3
    assert diag["eigengap"] >= 0
    assert diag["n_window"] > 0


def test_auto_method(rng):
    assert CovarianceSmoother(common_panel(rng, 3, 2, 4), KernelSpec(0.5)).method == "common"
    assert CovarianceSmoother(irregular_panel(rng, 3, 2), KernelSpec(0.5)).method == "pooled"
    assert common_panel(rng, 3, 2, 4).design is Design.COMMON
