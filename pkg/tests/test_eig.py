import numpy as np
import pytest

from _oracles import dense_gevp
from idic.eig import (EigError, PriorOperator, eig_value, gevp_adaptive, gevp_randomized,
                      write_spectrum_csv)
from idic.mesh import build_unit_square_mesh


@pytest.fixture(scope="module")
def prior():
    return PriorOperator(build_unit_square_mesh(6), 0.1, 0.5)


def _psd_operator(prior, rng, decay=0.3, scale=50.0, rank=None):
    """H = B W diag(lam) W^T B with a geometric spectrum (optionally truncated)."""
    n = prior.size
    B = prior.matrix.toarray()
    W = rng.standard_normal((n, n))
    lam = scale * decay ** np.arange(n)
    if rank is not None:
        lam[rank:] = 0.0
    H = B @ W @ np.diag(lam) @ W.T @ B
    return 0.5 * (H + H.T)


def test_prior_validation():
    mesh = build_unit_square_mesh(2)
    with pytest.raises(ValueError):
        PriorOperator(mesh, 0.0, 1.0)
    with pytest.raises(ValueError):
        PriorOperator(mesh, 1.0, -1.0)


def test_prior_solve(prior, rng):
    b = rng.standard_normal((prior.size, 3))
    x = prior.solve(b)
    assert np.allclose(prior.matrix @ x, b, atol=1e-10)
    assert np.allclose(prior.apply(prior.solve(b[:, 0])), b[:, 0], atol=1e-10)


def test_zero_hessian(prior):
    res = gevp_randomized(lambda x: np.zeros_like(x), prior, 5)
    assert res.rank == 5 and not np.any(res.eigenvalues)
    assert eig_value(res) == 0.0


def test_scaled_prior_identity(prior):
    c = 3.7
    res = gevp_randomized(lambda x: c * prior.apply(x), prior, 8, seed=2)
    assert np.allclose(res.eigenvalues, c, rtol=1e-10)


@pytest.mark.parametrize("decay,rank,power_iters", [(0.6, 15, 0), (0.6, None, 3)])
def test_matches_dense_oracle(prior, rng, decay, rank, power_iters):
    # plain double pass is exact when the sketch covers the whole range
    H = _psd_operator(prior, rng, decay, rank=rank)
    r = 8
    res = gevp_randomized(lambda x: H @ x, prior, r, oversample=10, seed=5, power_iters=power_iters)
    ref = dense_gevp(H, prior.matrix.toarray(), r)
    assert np.allclose(res.eigenvalues, ref, rtol=1e-6)
    # B-orthonormal eigenvectors satisfying the pencil
    V = res.eigenvectors
    B = prior.matrix.toarray()
    assert np.allclose(V.T @ B @ V, np.eye(r), atol=1e-8)
    resid = H @ V - B @ V * res.eigenvalues
    assert np.abs(resid).max() <= 1e-4 * res.eigenvalues[0]


def test_power_iterations_help(prior, rng):
    H = _psd_operator(prior, rng, 0.7)
    ref = dense_gevp(H, prior.matrix.toarray(), 6)
    errs = [np.abs(gevp_randomized(lambda x: H @ x, prior, 6, 4, seed=1, power_iters=q).eigenvalues - ref).max()
            for q in (0, 2)]
    assert errs[1] < 0.1 * errs[0]


def test_rank_deficiency_warns(rng):
    mesh = build_unit_square_mesh(1)  # 4 unknowns
    pr = PriorOperator(mesh, 1.0, 1.0)
    H = np.diag([3.0, 0, 0, 0])
    with pytest.warns(RuntimeWarning):
        res = gevp_randomized(lambda x: H @ x, pr, 6)
    assert res.rank == 1 and res.eigenvalues[0] > 0


def test_adaptive_stops_on_decay(prior, rng):
    H = _psd_operator(prior, rng, decay=0.3)
    res = gevp_adaptive(lambda x: H @ x, prior, r0=4, r_max=40, ratio=1e-3)
    assert res.eigenvalues[-1] < 1e-3 * res.eigenvalues[0]
    assert res.rank in (8, 16)


def test_adaptive_respects_rmax(prior, rng):
    H = _psd_operator(prior, rng, decay=0.95)
    res = gevp_adaptive(lambda x: H @ x, prior, r0=4, r_max=12)
    assert res.rank == 12


def test_eig_value_examples():
    assert eig_value(np.array([1.0, 3.0])) == pytest.approx(2.0794, abs=1e-4)
    assert eig_value(np.array([1.0, 3.0, 0.0])) == eig_value(np.array([1.0, 3.0]))
    assert eig_value(np.zeros(4)) == 0.0
    assert eig_value(np.array([2.0, -1e-12])) == pytest.approx(np.log(3.0))
    with pytest.raises(EigError):
        eig_value(np.array([1.0, -1e-6]))


def test_eig_value_monotone(rng):
    lam = np.sort(rng.uniform(0, 5, 6))[::-1]
    base = eig_value(lam)
    bumped = lam.copy()
    bumped[2] += 0.5
    assert eig_value(bumped) > base
    assert eig_value(np.append(lam, 0.1)) > base


def test_spectrum_csv(tmp_path, prior):
    res = gevp_randomized(lambda x: 2.0 * prior.apply(x), prior, 3)
    write_spectrum_csv(tmp_path / "s.csv", res)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "i,lambda" and len(lines) == 4
    assert float(lines[1].split(",")[1]) == pytest.approx(2.0)
