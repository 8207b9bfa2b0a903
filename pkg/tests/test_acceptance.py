"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``).
The summary lines are printed at the end of the session by ``conftest.py``.
Criteria 11 and 12 execute the full default experiment and take roughly
twenty minutes on one CPU core.
"""

from __future__ import annotations

import contextlib
import json
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

sys.path.insert(0, str(Path(__file__).parent))

from helpers import fd_jacobian, random_params, rel_err, spd_with_gap  # noqa: E402
from quadlaplace.cli import main as cli_main  # noqa: E402
from quadlaplace.curvature import CurvatureOperator, power_iteration  # noqa: E402
from quadlaplace.data import GapSplit, RegressionDataset, gap_split, gap_splits, standardize  # noqa: E402
from quadlaplace.laplace import (build_lla_posterior,  # noqa: E402
                                 build_qla_posterior, glm_predictive_batch,
                                 log_marginal_likelihood, qte_predictive_diagnostic)
from quadlaplace.likelihood import LOG_2PI, GaussianLikelihood  # noqa: E402
from quadlaplace.metrics import crps, nll  # noqa: E402
from quadlaplace.nnet import (NetworkSpec, dense_hessian, forward, hvp, jacobian, jacobian_batch,  # noqa: E402
                              predict, unflatten)

DATA = Path(__file__).parents[1] / "data"
RESULTS: dict[int, tuple[str, str, str]] = {}

TITLES = {
    1: "autodiff Jacobian/HVP match finite differences",
    2: "HVP symmetry and linearity on 1000 probes",
    3: "power iteration matches dense eigensolver",
    4: "LLA equals closed-form Bayesian linear regression",
    5: "QLA reduces to LLA for linear models",
    6: "Woodbury forms match dense algebra",
    7: "refined factor is the optimal rank-one approximation",
    8: "quadratic predictive moments match Monte Carlo",
    9: "NLL and CRPS correctness",
    10: "gap splits and train-only standardization",
    11: "soft reproduction on Boston and Wine",
    12: "two Wine runs give byte-identical reports",
}


@contextlib.contextmanager
def criterion(n: int, detail: list | None = None):
    try:
        yield
    except BaseException as exc:
        RESULTS[n] = ("FAIL", TITLES[n], f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}"
                      if str(exc) else type(exc).__name__)
        raise
    RESULTS[n] = ("PASS", TITLES[n], "; ".join(detail or []))


def _random_tanh_spec(rng, max_layers=3, max_width=50, max_dim=8):
    n_layers = int(rng.integers(1, max_layers + 1))
    return NetworkSpec(int(rng.integers(1, max_dim + 1)),
                       tuple(int(rng.integers(1, max_width + 1)) for _ in range(n_layers)))


def _forward_many(spec, thetas, x):
    """Forward pass for a stack of parameter vectors (rows of ``thetas``)."""
    h = np.broadcast_to(x, (thetas.shape[0], x.shape[0]))
    layers = unflatten(spec, thetas)
    for l, (W, b) in enumerate(layers):
        a = np.einsum("moi,mi->mo", W, h) + b
        h = np.tanh(a) if l < len(layers) - 1 else a
    return h[:, 0]


def _fd_jacobian_fast(spec, theta, x, eps=1e-5, chunk=256):
    P = spec.n_params
    out = np.empty(P)
    for start in range(0, P, chunk):
        idx = np.arange(start, min(P, start + chunk))
        T = np.repeat(theta[None, :], len(idx), axis=0)
        T[np.arange(len(idx)), idx] += eps
        fp = _forward_many(spec, T, x)
        T[np.arange(len(idx)), idx] -= 2 * eps
        fm = _forward_many(spec, T, x)
        out[idx] = (fp - fm) / (2 * eps)
    return out


# ---------------------------------------------------------------------------

def test_c01_autodiff_finite_differences():
    with criterion(1, detail := []):
        rng = np.random.default_rng(101)
        t0 = time.perf_counter()
        worst_j = worst_h = 0.0
        max_p = 0
        for draw in range(100):
            spec = _random_tanh_spec(rng)
            theta = random_params(spec, rng)
            x = rng.standard_normal(spec.input_dim)
            max_p = max(max_p, spec.n_params)
            J = jacobian(spec, theta, x)
            fd = _fd_jacobian_fast(spec, theta, x)
            if draw < 3:   # cross-check the vectorized oracle against the plain one
                assert rel_err(fd, fd_jacobian(spec, theta, x)) <= 1e-9
            worst_j = max(worst_j, rel_err(J, fd))
            v = rng.standard_normal(spec.n_params)
            v /= np.linalg.norm(v)
            eps = 1e-5
            fd_h = (jacobian(spec, theta + eps * v, x) - jacobian(spec, theta - eps * v, x)) / (2 * eps)
            worst_h = max(worst_h, rel_err(hvp(spec, theta, x, v), fd_h))
        elapsed = time.perf_counter() - t0
        detail += [f"max Jacobian rel err {worst_j:.1e}", f"max HVP rel err {worst_h:.1e}",
                   f"largest P {max_p}", f"{elapsed:.1f}s"]
        assert worst_j <= 1e-6, worst_j
        assert worst_h <= 1e-5, worst_h
        assert elapsed <= 60.0, elapsed


def test_c02_hvp_symmetry_linearity():
    with criterion(2, detail := []):
        rng = np.random.default_rng(202)
        worst_lin = worst_sym = 0.0
        for _ in range(100):
            spec = _random_tanh_spec(rng)
            theta = random_params(spec, rng)
            x = rng.standard_normal(spec.input_dim)
            for _ in range(10):
                u, v = rng.standard_normal((2, spec.n_params))
                alpha = float(rng.standard_normal())
                lhs = hvp(spec, theta, x, u + alpha * v)
                hu, hv = hvp(spec, theta, x, u), hvp(spec, theta, x, v)
                worst_lin = max(worst_lin, rel_err(lhs, hu + alpha * hv))
                a, b = u @ hv, v @ hu
                worst_sym = max(worst_sym, abs(a - b) / max(abs(a), abs(b)))
        detail += [f"max linearity rel err {worst_lin:.1e}", f"max symmetry rel err {worst_sym:.1e}"]
        assert worst_lin <= 1e-12, worst_lin
        assert worst_sym <= 1e-10, worst_sym


def test_c03_power_iteration_oracle():
    with criterion(3, detail := []):
        rng = np.random.default_rng(303)
        worst_cos = worst_ray = 0.0
        for i in range(50):
            P = int(rng.integers(2, 201))
            A, v1, lam1 = spd_with_gap(rng, P, gap=1.5, negative=bool(i % 2))
            ev = np.linalg.eigvalsh(A)
            mags = np.sort(np.abs(ev))[::-1]
            assert mags[0] / mags[1] >= 1.5
            fac = power_iteration(A, rng.standard_normal(P), 50)
            # reference eigenpair straight from the dense solver
            w, V = np.linalg.eigh(A)
            j = int(np.argmax(np.abs(w)))
            worst_cos = max(worst_cos, 1 - abs(fac.z_hat @ V[:, j]))
            worst_ray = max(worst_ray, abs(fac.rayleigh - w[j]) / abs(w[j]))
        detail += [f"max 1-cos {worst_cos:.1e}", f"max rayleigh rel err {worst_ray:.1e}"]
        assert worst_cos <= 1e-6 and worst_ray <= 1e-6


def test_c04_lla_exact_for_linear_models():
    with criterion(4, detail := []):
        rng = np.random.default_rng(404)
        worst = 0.0
        for _ in range(10):
            D, N = int(rng.integers(1, 8)), int(rng.integers(1, 60))
            spec = NetworkSpec(D)
            X = rng.standard_normal((N, D))
            y = rng.standard_normal(N)
            beta, s0 = float(rng.uniform(0.2, 5)), float(rng.uniform(0.1, 5))
            Phi = np.hstack([X, np.ones((N, 1))])
            prec = beta * Phi.T @ Phi + np.eye(D + 1) / s0
            cov = np.linalg.inv(prec)
            theta_map = cov @ (beta * Phi.T @ y)
            post = build_lla_posterior(spec, theta_map, GaussianLikelihood(beta), X, s0)
            worst = max(worst, rel_err(post.precision_dense(), prec), rel_err(post.covariance_dense(), cov))
            xs = rng.standard_normal((5, D))
            m, v = glm_predictive_batch(post, spec, xs, GaussianLikelihood(beta), with_noise=False)
            Phs = np.hstack([xs, np.ones((5, 1))])
            worst = max(worst, rel_err(m, Phs @ theta_map), rel_err(v, np.einsum("np,pq,nq->n", Phs, cov, Phs)))
        detail.append(f"max rel err {worst:.1e}")
        assert worst <= 1e-10, worst


def test_c05_qla_reduces_to_lla():
    with criterion(5, detail := []):
        rng = np.random.default_rng(505)
        worst = 0.0
        for _ in range(20):
            D, N = int(rng.integers(1, 8)), int(rng.integers(1, 40))
            spec = NetworkSpec(D)
            theta = rng.standard_normal(D + 1)
            X, y = rng.standard_normal((N, D)), 3 * rng.standard_normal(N)
            lik = GaussianLikelihood(float(rng.uniform(0.2, 5)))
            s0 = float(rng.uniform(0.1, 5))
            lla = build_lla_posterior(spec, theta, lik, X, s0)
            qla = build_qla_posterior(spec, theta, lik, X, y, s0, k=10, scaling_mode="rayleigh")
            worst = max(worst, rel_err(qla.factors, lla.factors))
            V = rng.standard_normal((10, D + 1))
            worst = max(worst, rel_err(qla.quadform_rows(V), lla.quadform_rows(V)))
            xs = rng.standard_normal((6, D))
            ml, vl = glm_predictive_batch(lla, spec, xs, lik)
            mq, vq = glm_predictive_batch(qla, spec, xs, lik)
            worst = max(worst, rel_err(mq, ml), rel_err(vq, vl))
        detail.append(f"max rel err {worst:.1e}")
        assert worst <= 1e-10, worst


def test_c06_woodbury_equals_dense():
    with criterion(6, detail := []):
        rng = np.random.default_rng(606)
        worst_q = worst_e = 0.0
        for _ in range(10):
            d = int(rng.integers(1, 6))
            h = int(rng.integers(2, 11))
            spec = NetworkSpec(d, (h, h))
            assert spec.n_params <= 200
            N = int(rng.integers(1, 101))
            theta = random_params(spec, rng)
            X = rng.standard_normal((N, d))
            y = predict(spec, theta, X) + rng.standard_normal(N)
            s0, beta = float(10 ** rng.uniform(-2, 1)), float(10 ** rng.uniform(-1, 1))
            lik = GaussianLikelihood(beta)
            for post in (build_lla_posterior(spec, theta, lik, X, s0),
                         build_qla_posterior(spec, theta, lik, X, y, s0)):
                S = np.linalg.inv(post.precision_dense())
                V = rng.standard_normal((5, spec.n_params))
                dense = np.einsum("np,pq,nq->n", V, S, V)
                worst_q = max(worst_q, float(np.max(np.abs(post.quadform_rows(V) - dense) / dense)))
            J = jacobian_batch(spec, theta, X)
            r = y - predict(spec, theta, X)
            # parameter-space evidence: Gaussian integral over the linear model's weights
            P = spec.n_params
            A = beta * J.T @ J + np.eye(P) / s0
            mu = np.linalg.solve(A, beta * J.T @ r)
            ref = (-0.5 * beta * np.sum((r - J @ mu) ** 2) - 0.5 * mu @ mu / s0
                   - 0.5 * (np.linalg.slogdet(A)[1] + P * math.log(s0))
                   + 0.5 * N * math.log(beta) - 0.5 * N * LOG_2PI)
            val = log_marginal_likelihood(spec, theta, X, y, s0, beta)
            worst_e = max(worst_e, abs(val - ref) / abs(ref))
        detail += [f"max quadform rel err {worst_q:.1e}", f"max evidence rel err {worst_e:.1e}"]
        assert worst_q <= 1e-8 and worst_e <= 1e-8


def test_c07_rank_one_optimality():
    with criterion(7, detail := []):
        rng = np.random.default_rng(707)
        spec = NetworkSpec(2, (4, 4))
        assert spec.n_params <= 50
        worst = 0.0
        ratios = []
        for _ in range(20):
            theta = random_params(spec, rng, scale=1.5)
            x = rng.standard_normal(2)
            y = forward(spec, theta, x) + 2.0 * rng.standard_normal()
            op = CurvatureOperator(spec, theta, x, y, GaussianLikelihood(1.0))
            A = op.dense()
            mags = np.sort(np.abs(np.linalg.eigvalsh(A)))[::-1]
            ratios.append(mags[1] / mags[0])
            fac = power_iteration(op, op.jac, 5000)
            resid = np.linalg.norm(-A - (-fac.rayleigh) * np.outer(fac.z_hat, fac.z_hat), 2)
            worst = max(worst, abs(resid - mags[1]) / mags[1])
        detail += [f"max rel err {worst:.1e}", f"max |l2/l1| {max(ratios):.3f}", "5000 iterations"]
        assert worst <= 1e-6, worst


def test_c08_quadratic_predictive_monte_carlo():
    with criterion(8, detail := []):
        rng = np.random.default_rng(808)
        worst_z = 0.0
        n_samples, chunk = 1_000_000, 100_000
        for _ in range(5):
            spec = NetworkSpec(2, (4,))
            theta = random_params(spec, rng, scale=1.5)
            X = rng.standard_normal((6, 2))
            post = build_lla_posterior(spec, theta, GaussianLikelihood(2.0), X, 0.5)
            x = rng.standard_normal(2)
            pred = qte_predictive_diagnostic(post, spec, x)
            S = post.covariance_dense()
            L = np.linalg.cholesky(S)
            H = dense_hessian(spec, theta, x)
            J = jacobian(spec, theta, x)
            f0 = forward(spec, theta, x)
            s1 = s2 = s3 = s4 = 0.0
            for _ in range(n_samples // chunk):
                d = rng.standard_normal((chunk, spec.n_params)) @ L.T
                fq = f0 + d @ J + 0.5 * np.einsum("np,pq,nq->n", d, H, d)
                c = fq - pred.mean
                s1 += c.sum()
                s2 += (c ** 2).sum()
                s3 += (c ** 3).sum()
                s4 += (c ** 4).sum()
            n = n_samples
            mean_dev = s1 / n
            var_mc = s2 / n - mean_dev ** 2
            mu4 = s4 / n          # about the formula mean; differences are far below the error bars
            se_mean = math.sqrt(var_mc / n)
            se_var = math.sqrt(max(mu4 - var_mc ** 2, 0.0) / n)
            z_mean = abs(mean_dev) / se_mean
            z_var = abs(var_mc - pred.variance) / se_var
            worst_z = max(worst_z, z_mean, z_var)
            assert z_mean <= 3 and z_var <= 3, (z_mean, z_var)
        detail.append(f"max |z| {worst_z:.2f} over 5 instances, 1e6 samples each")


def test_c09_metrics():
    with criterion(9, detail := []):
        rng = np.random.default_rng(909)
        worst_n = worst_c = 0.0
        triples = [(0.0, 1.0, 0.0)] + [(float(rng.normal(scale=2)), float(rng.uniform(0.1, 3)),
                                        float(rng.normal(scale=3))) for _ in range(99)]
        for m, s, y in triples:
            analytic = 0.5 * math.log(2 * math.pi * s * s) + 0.5 * (y - m) ** 2 / (s * s)
            worst_n = max(worst_n, abs(nll(m, y, s * s) - analytic), abs(nll(m, y, s * s) + stats.norm(m, s).logpdf(y)))
            F = stats.norm(m, s).cdf
            lo, _ = integrate.quad(lambda t: F(t) ** 2, -np.inf, y, epsabs=1e-13, epsrel=1e-13, limit=200)
            hi, _ = integrate.quad(lambda t: (1 - F(t)) ** 2, y, np.inf, epsabs=1e-13, epsrel=1e-13, limit=200)
            worst_c = max(worst_c, abs(crps(m, y, s * s) - (lo + hi)))
        anchor = abs(crps(0.0, 0.0, 1.0) - (math.sqrt(2) - 1) / math.sqrt(math.pi))
        detail += [f"max NLL err {worst_n:.1e}", f"max CRPS err {worst_c:.1e}", f"anchor err {anchor:.1e}"]
        assert worst_n <= 1e-12 and worst_c <= 1e-8 and anchor <= 1e-12


def test_c10_protocol():
    with criterion(10, detail := []):
        X = np.arange(1, 10, dtype=float)[:, None]
        assert gap_split(X, 0).test_indices.tolist() == [3, 4, 5]
        X = np.array([[9.0], [1.0], [8.0], [2.0], [7.0], [3.0], [6.0], [4.0], [5.0]])
        # sort order of rows: 1 3 5 7 8 6 4 2 0 -> middle third rows 7, 8, 6
        assert gap_split(X, 0).test_indices.tolist() == [6, 7, 8]
        assert gap_split(np.zeros((9, 1)), 0).test_indices.tolist() == [3, 4, 5]
        ties = np.array([[2.0], [1.0], [2.0], [1.0], [2.0], [1.0], [0.0], [2.0], [1.0], [0.0]])
        # stable order: 6 9 | 1 3 5 8 | 0 2 4 7 with N=10 -> positions 3..5 are rows 3, 5, 8
        assert gap_split(ties, 0).test_indices.tolist() == [3, 5, 8]
        ds = RegressionDataset(np.random.default_rng(0).standard_normal((10, 2)), np.zeros(10))
        assert all(len(s.test_indices) == 3 for s in gap_splits(ds))

        rng = np.random.default_rng(1)
        X, y = rng.normal(3, 2, size=(30, 3)), rng.normal(-1, 5, size=30)
        split = gap_splits(RegressionDataset(X, y))[1]
        tr, te = standardize(RegressionDataset(X, y), split)
        trn = split.train_indices
        assert np.allclose(tr.feature_means, X[trn].mean(0), rtol=0, atol=1e-14)
        assert np.allclose(tr.feature_stds, X[trn].std(0), rtol=0, atol=1e-14)
        X2, y2 = X.copy(), y.copy()
        X2[split.test_indices] += 1e3
        y2[split.test_indices] *= -50
        tr2, te2 = standardize(RegressionDataset(X2, y2), split)
        assert tr2.X.tobytes() == tr.X.tobytes() and tr2.target_std == tr.target_std
        assert np.allclose(te.X, (X[split.test_indices] - tr.feature_means) / tr.feature_stds)
        two = standardize(RegressionDataset(np.zeros((3, 1)), np.array([0.0, 2.0, 7.0])),
                          GapSplit(0, np.array([0, 1]), np.array([2])))[0]
        assert two.y.tolist() == [-1.0, 1.0]
        detail.append("hand-built splits with ties and train-only statistics verified")


# ---------------------------------------------------------------------------
# full experiment (criteria 11 and 12)
# ---------------------------------------------------------------------------

TABLE_NLL = {"boston": 2.73, "wine": 1.00}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    args = ["-d", str(DATA / "boston.csv"), "-d", str(DATA / "wine.csv"), "-o", str(out)]
    t0 = time.perf_counter()
    assert cli_main(["split", *args]) == 0
    code = cli_main(["run", *args])
    elapsed = time.perf_counter() - t0
    return out, code, elapsed


def test_c11_soft_reproduction(full_run):
    with criterion(11, detail := []):
        out, code, elapsed = full_run
        assert code == 0
        summary = json.loads((out / "report.json").read_text())["summary"]
        for ds, target in TABLE_NLL.items():
            lla = summary[ds]["lla"]["nll"]["mean"]
            qla = summary[ds]["qla"]["nll"]["mean"]
            detail.append(f"{ds} NLL LLA {lla:.3f} QLA {qla:.3f} (target {target})")
            assert abs(lla - target) <= 0.5 and abs(qla - target) <= 0.5, (ds, lla, qla)
            assert abs(qla - lla) < 0.1, (ds, qla - lla)
        detail.append(f"runtime {elapsed / 60:.1f} min")
        assert elapsed <= 30 * 60, elapsed


def test_c12_determinism(full_run, tmp_path):
    with criterion(12, detail := []):
        first, code, _ = full_run
        assert code == 0
        # the first Wine run, reported on its own
        solo = tmp_path / "first"
        shutil.copytree(first / "wine", solo / "wine")
        shutil.copy(first / "config.effective.yaml", solo / "config.effective.yaml")
        assert cli_main(["report", str(solo), "--no-figures"]) == 0
        # a second, independent Wine run with the same seed
        second = tmp_path / "second"
        args = ["-d", str(DATA / "wine.csv"), "-o", str(second)]
        assert cli_main(["split", *args]) == 0
        assert cli_main(["run", *args, "--no-figures"]) == 0
        for name in ("report.md", "report.json"):
            assert (solo / name).read_bytes() == (second / name).read_bytes(), name
        n = 0
        for m in sorted((first / "wine").glob("gap*/metrics.json")):
            assert m.read_bytes() == (second / "wine" / m.parent.name / "metrics.json").read_bytes()
            n += 1
        detail.append(f"report.md, report.json and {n} split metric files identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
