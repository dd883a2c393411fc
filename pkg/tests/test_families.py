"""Family-layer tests: Yeo-Johnson calculus against finite differences, block
densities against dense linear algebra, and the parameter chain rules against
finite differences through the sampling maps."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.stats as st

from fsvb.families import (
    SrnBlock,
    TbnBlock,
    VariationalSpec,
    count_variational_params,
    gamma_from_unconstrained,
    joint_block_sizes,
    lowrank_logdet,
    srn_b_mask,
    srn_grad_values,
    srn_log_density,
    srn_param_grads,
    srn_sample,
    tbn_grad_sample,
    tbn_log_density,
    tbn_param_grads,
    tbn_sample,
    woodbury_apply,
    yj_derivative,
    yj_dgamma,
    yj_dlog_derivative,
    yj_forward,
    yj_inverse,
)
from fsvb.model import ModelSpec


def random_tbn(g: int, h: int, rng: np.random.Generator) -> TbnBlock:
    return TbnBlock(
        mu_g=rng.normal(0.0, 1.0, g),
        cstar_g=np.tril(rng.normal(0.0, 0.3, (g, g))),
        d=rng.normal(0.0, 1.0, h),
        dmat=rng.normal(0.0, 0.3, (h, g)),
        fstar=rng.normal(0.0, 0.3, 2 * h - 1),
        fmat=rng.normal(0.0, 0.2, (2 * h - 1, g)),
    )


def random_srn(r: int, p: int, rng: np.random.Generator) -> SrnBlock:
    b = rng.normal(0.0, 0.3, (r, p))
    b[~srn_b_mask(r, p)] = 0.0
    return SrnBlock(
        gamma_u=rng.normal(0.0, 0.5, r),
        mu=rng.normal(0.0, 1.0, r),
        bmat=b,
        dvec=rng.uniform(0.3, 1.5, r),
    )


def dense_cl(block: TbnBlock, xi: np.ndarray) -> np.ndarray:
    c = block.fstar + block.fmat @ xi
    h = block.n_locals
    cl = np.zeros((h, h))
    cl[np.arange(h), np.arange(h)] = np.exp(c[0::2])
    cl[np.arange(1, h), np.arange(h - 1)] = c[1::2]
    return cl


class TestYeoJohnson:
    def test_round_trip(self, rng):
        gamma = rng.uniform(0.05, 1.95, 200)
        x = rng.normal(0.0, 3.0, 200)
        np.testing.assert_allclose(yj_inverse(yj_forward(x, gamma), gamma), x,
                                   rtol=1e-12, atol=1e-12)
        xi = rng.normal(0.0, 3.0, 200)
        np.testing.assert_allclose(yj_forward(yj_inverse(xi, gamma), gamma), xi,
                                   rtol=1e-12, atol=1e-12)

    def test_gamma_one_is_identity(self, rng):
        x = rng.normal(0.0, 2.0, 50)
        np.testing.assert_allclose(yj_forward(x, np.ones(50)), x, atol=1e-14)
        np.testing.assert_allclose(yj_derivative(x, np.ones(50)), 1.0, atol=1e-14)

    def test_derivative_matches_fd(self, rng):
        gamma = rng.uniform(0.05, 1.95, 100)
        x = rng.normal(0.0, 2.0, 100)
        eps = 1e-6
        fd = (yj_forward(x + eps, gamma) - yj_forward(x - eps, gamma)) / (2 * eps)
        np.testing.assert_allclose(yj_derivative(x, gamma), fd, rtol=1e-7, atol=1e-9)

    def test_dgamma_matches_fd(self, rng):
        gamma = rng.uniform(0.1, 1.9, 100)
        x = rng.normal(0.0, 2.0, 100)
        eps = 1e-6
        fd = (yj_forward(x, gamma + eps) - yj_forward(x, gamma - eps)) / (2 * eps)
        np.testing.assert_allclose(yj_dgamma(x, gamma), fd, rtol=1e-6, atol=1e-8)

    def test_dlog_derivative_matches_fd(self, rng):
        gamma = rng.uniform(0.05, 1.95, 100)
        x = rng.normal(0.0, 2.0, 100)
        eps = 1e-6
        fd = (np.log(yj_derivative(x + eps, gamma)) - np.log(yj_derivative(x - eps, gamma))) / (2 * eps)
        np.testing.assert_allclose(yj_dlog_derivative(x, gamma), fd, rtol=1e-7, atol=1e-9)

    def test_domain_errors(self):
        for bad in (0.0, -0.3, 2.0, 2.5):
            with pytest.raises(ValueError):
                yj_forward(np.array([0.5]), np.array([bad]))

    def test_gamma_map(self):
        assert gamma_from_unconstrained(np.array([0.0]))[0] == pytest.approx(1.0)
        vals = gamma_from_unconstrained(np.array([-30.0, 30.0]))
        assert 0.0 < vals[0] < 1e-10 + 1e-12
        assert 2.0 - 1e-10 < vals[1] < 2.0


class TestTbnBlock:
    @pytest.mark.parametrize("g,h", [(3, 6), (2, 9), (3, 1)])
    def test_sample_matches_dense_map(self, g, h, rng):
        block = random_tbn(g, h, rng)
        eta_g, eta_l = rng.normal(size=g), rng.normal(size=h)
        s = tbn_sample(block, eta_g, eta_l)
        cg = block.chol_g()
        xi = block.mu_g + np.linalg.solve(cg.T, eta_g)
        np.testing.assert_allclose(s.xi, xi, rtol=1e-12)
        cl = dense_cl(block, xi)
        zeta = block.d + np.linalg.solve(cl.T, block.dmat @ (block.mu_g - xi) + eta_l)
        np.testing.assert_allclose(s.zeta, zeta, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("g,h", [(3, 6), (2, 9)])
    def test_log_density_matches_dense_oracle(self, g, h, rng):
        block = random_tbn(g, h, rng)
        s = tbn_sample(block, rng.normal(size=g), rng.normal(size=h))
        cg = block.chol_g()
        cov_g = np.linalg.inv(cg @ cg.T)
        cl = dense_cl(block, s.xi)
        mu_l = block.d + np.linalg.solve(cl.T, block.dmat @ (block.mu_g - s.xi))
        cov_l = np.linalg.inv(cl @ cl.T)
        expected = (st.multivariate_normal.logpdf(s.xi, block.mu_g, cov_g)
                    + st.multivariate_normal.logpdf(s.zeta, mu_l, cov_l))
        np.testing.assert_allclose(tbn_log_density(block, s.xi, s.zeta), expected, rtol=1e-10)
        np.testing.assert_allclose(
            tbn_log_density(block, s.xi, s.zeta, sample=s), expected, rtol=1e-10
        )

    def test_grad_sample_matches_fd(self, rng):
        g, h = 3, 5
        block = random_tbn(g, h, rng)
        s = tbn_sample(block, rng.normal(size=g), rng.normal(size=h))
        g_xi, g_zeta = tbn_grad_sample(block, s.xi, s.zeta, sample=s)
        eps = 1e-6
        for i in range(g):
            hi, lo = s.xi.copy(), s.xi.copy()
            hi[i] += eps
            lo[i] -= eps
            fd = (tbn_log_density(block, hi, s.zeta)
                  - tbn_log_density(block, lo, s.zeta)) / (2 * eps)
            np.testing.assert_allclose(g_xi[i], fd, rtol=1e-6, atol=1e-6)
        for j in range(h):
            hi, lo = s.zeta.copy(), s.zeta.copy()
            hi[j] += eps
            lo[j] -= eps
            fd = (tbn_log_density(block, s.xi, hi)
                  - tbn_log_density(block, s.xi, lo)) / (2 * eps)
            np.testing.assert_allclose(g_zeta[j], fd, rtol=1e-6, atol=1e-6)

    def test_grad_sample_agrees_with_and_without_cache(self, rng):
        block = random_tbn(3, 7, rng)
        s = tbn_sample(block, rng.normal(size=3), rng.normal(size=7))
        a = tbn_grad_sample(block, s.xi, s.zeta, sample=s)
        b = tbn_grad_sample(block, s.xi, s.zeta)
        np.testing.assert_allclose(a[0], b[0], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("g,h", [(3, 5), (2, 8)])
    def test_param_grads_match_fd_through_sampler(self, g, h, rng):
        block = random_tbn(g, h, rng)
        eta_g, eta_l = rng.normal(size=g), rng.normal(size=h)
        a, b = rng.normal(size=g), rng.normal(size=h)

        def target(blk: TbnBlock) -> float:
            s = tbn_sample(blk, eta_g, eta_l)
            return float(a @ s.xi + b @ s.zeta)

        s = tbn_sample(block, eta_g, eta_l)
        grads = tbn_param_grads(block, s, a.copy(), b.copy())
        eps = 1e-6
        tril = list(zip(*np.tril_indices(g)))
        layouts = {
            "mu_g": [(i,) for i in range(g)],
            "cstar_g": tril,
            "d": [(i,) for i in range(h)],
            "dmat": [(i, j) for i in range(h) for j in range(g)],
            "fstar": [(i,) for i in range(2 * h - 1)],
            "fmat": [(i, j) for i in range(2 * h - 1) for j in range(g)],
        }
        for name, coords in layouts.items():
            for idx in coords:
                hi, lo = block.copy(), block.copy()
                getattr(hi, name)[idx] += eps
                getattr(lo, name)[idx] -= eps
                fd = (target(hi) - target(lo)) / (2 * eps)
                np.testing.assert_allclose(
                    grads[name][idx], fd, rtol=1e-5, atol=1e-6,
                    err_msg=f"parameter chain mismatch at {name}{idx}",
                )


class TestSrnBlock:
    @pytest.mark.parametrize("r,p", [(6, 0), (8, 3), (1, 0), (5, 5)])
    def test_sample_matches_dense_map(self, r, p, rng):
        block = random_srn(r, p, rng)
        z, eta = rng.normal(size=p), rng.normal(size=r)
        s = srn_sample(block, z, eta)
        xi = block.mu + block.bmat @ z + block.dvec * eta
        np.testing.assert_allclose(s.xi, xi, rtol=1e-12)
        np.testing.assert_allclose(s.values, yj_inverse(xi, block.gamma()), rtol=1e-12)

    @pytest.mark.parametrize("r,p", [(6, 0), (8, 3)])
    def test_log_density_matches_dense_oracle(self, r, p, rng):
        block = random_srn(r, p, rng)
        s = srn_sample(block, rng.normal(size=p), rng.normal(size=r))
        cov = block.bmat @ block.bmat.T + np.diag(block.dvec**2)
        gamma = block.gamma()
        expected = st.multivariate_normal.logpdf(s.xi, block.mu, cov)
        expected += float(np.sum(np.log(yj_derivative(s.values, gamma))))
        np.testing.assert_allclose(srn_log_density(block, s.values), expected, rtol=1e-10)

    def test_grad_values_matches_fd(self, rng):
        block = random_srn(7, 2, rng)
        s = srn_sample(block, rng.normal(size=2), rng.normal(size=7))
        grad = srn_grad_values(block, s.values, sample=s)
        eps = 1e-6
        for i in range(7):
            hi, lo = s.values.copy(), s.values.copy()
            hi[i] += eps
            lo[i] -= eps
            fd = (srn_log_density(block, hi) - srn_log_density(block, lo)) / (2 * eps)
            np.testing.assert_allclose(grad[i], fd, rtol=1e-6, atol=1e-6)

    @pytest.mark.parametrize("r,p", [(6, 0), (7, 3)])
    def test_param_grads_match_fd_through_sampler(self, r, p, rng):
        block = random_srn(r, p, rng)
        z, eta = rng.normal(size=p), rng.normal(size=r)
        a = rng.normal(size=r)

        def target(blk: SrnBlock) -> float:
            return float(a @ srn_sample(blk, z, eta).values)

        s = srn_sample(block, z, eta)
        grads = srn_param_grads(block, s, a.copy())
        eps = 1e-6
        mask = srn_b_mask(r, p)
        for name in ("gamma_u", "mu", "dvec"):
            for i in range(r):
                hi, lo = block.copy(), block.copy()
                getattr(hi, name)[i] += eps
                getattr(lo, name)[i] -= eps
                fd = (target(hi) - target(lo)) / (2 * eps)
                np.testing.assert_allclose(
                    grads[name][i], fd, rtol=1e-5, atol=1e-6,
                    err_msg=f"parameter chain mismatch at {name}[{i}]",
                )
        for i in range(r):
            for j in range(p):
                if not mask[i, j]:
                    assert grads["bmat"][i, j] == 0.0
                    continue
                hi, lo = block.copy(), block.copy()
                hi.bmat[i, j] += eps
                lo.bmat[i, j] -= eps
                fd = (target(hi) - target(lo)) / (2 * eps)
                np.testing.assert_allclose(grads["bmat"][i, j], fd, rtol=1e-5, atol=1e-6)


class TestLowRankAlgebra:
    @pytest.mark.parametrize("r,p", [(10, 0), (10, 3), (4, 4)])
    def test_woodbury_apply_matches_dense_solve(self, r, p, rng):
        b = rng.normal(0.0, 0.5, (r, p))
        d = rng.uniform(0.3, 2.0, r)
        v = rng.normal(size=r)
        dense = np.linalg.solve(b @ b.T + np.diag(d**2), v)
        np.testing.assert_allclose(woodbury_apply(b, d, v), dense, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("r,p", [(10, 0), (10, 3), (4, 4)])
    def test_lowrank_logdet_matches_dense(self, r, p, rng):
        b = rng.normal(0.0, 0.5, (r, p))
        d = rng.uniform(0.3, 2.0, r)
        sign, expected = np.linalg.slogdet(b @ b.T + np.diag(d**2))
        assert sign > 0
        np.testing.assert_allclose(lowrank_logdet(b, d), expected, rtol=1e-10)


class TestParameterCounts:
    def test_block_counts_match_array_sizes(self, rng):
        tbn = random_tbn(3, 11, rng)
        total = sum([tbn.mu_g.size, 3 * 4 // 2, tbn.d.size, tbn.dmat.size,
                     tbn.fstar.size, tbn.fmat.size])
        assert tbn.n_params() == total
        srn = random_srn(9, 4, rng)
        assert srn.n_params() == 9 + 9 + 9 * 4 - 6 + 9

    def test_joint_block_sizes(self):
        model = ModelSpec(n_series=10, n_factors=3, n_periods=50)
        assert joint_block_sizes(model) == [60, 59, 58]

    def test_family_totals_cross_checked_small(self):
        model = ModelSpec(n_series=4, n_factors=2, n_periods=6)
        tbn3 = 3 + 6 + 6 + 18 + 11 * 4
        tbn2 = 2 + 3 + 6 + 12 + 11 * 3
        beta_free = 4 * 2 - 1
        srn_beta = 3 * beta_free + beta_free * 4 - 6
        q1 = 4 * tbn3 + 2 * tbn2 + 2 * (3 * 6) + srn_beta
        assert count_variational_params(VariationalSpec("q1"), model) == q1
        q3 = 4 * tbn3 + 2 * tbn2 + srn_beta
        assert count_variational_params(VariationalSpec("q3"), model) == q3
        q2 = 4 * tbn3 + 2 * tbn2 + sum(7 * r - 6 for r in (6 + 4, 6 + 3))
        assert count_variational_params(VariationalSpec("q2"), model) == q2
        mf = 2 * (model.n_theta() + model.n_states())
        assert count_variational_params(VariationalSpec("mf"), model) == mf

    def test_student_t_adds_scalar_blocks(self):
        model = ModelSpec(n_series=4, n_factors=2, n_periods=6)
        t_model = ModelSpec(n_series=4, n_factors=2, n_periods=6, error_family="student_t")
        for fam in ("q1", "q2", "q3"):
            delta = (count_variational_params(VariationalSpec(fam), t_model)
                     - count_variational_params(VariationalSpec(fam), model))
            assert delta == 3 * (4 + 2)
        delta_mf = (count_variational_params(VariationalSpec("mf"), t_model)
                    - count_variational_params(VariationalSpec("mf"), model))
        assert delta_mf == 2 * (4 + 2)

    def test_rejects_unknown_family(self):
        with pytest.raises(ValueError):
            VariationalSpec("q4")
