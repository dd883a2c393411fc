"""Variational families: Gaussian state-pair blocks and copula blocks.

Two building blocks cover every approximation this package fits:

* TbnBlock - a joint Gaussian over a small global vector xi (G entries) and a
  long local path zeta (H entries), parameterised through sparse Cholesky
  factors of the precision matrices.  The conditional mean and the conditional
  Cholesky factor of zeta are affine in xi, and the zeta factor is lower
  bidiagonal (2H-1 free entries), which matches the AR(1) smoothing structure
  of the states.

* SrnBlock - a Gaussian copula with Yeo-Johnson margins: values are obtained
  by pushing a low-rank-plus-diagonal Gaussian draw through inverse
  Yeo-Johnson transforms with per-coordinate curvature gamma in (0, 2).

Both expose sampling, log densities, gradients of the log density at a point,
and the chain-rule assembly that turns a gradient with respect to a sample
into gradients with respect to the block's parameters (the reparameterisation
estimator).  Cholesky-factor diagonals and gamma are stored unconstrained
(log scale and scaled-logistic scale respectively).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .model import ModelSpec
from .util import safe_exp, sigmoid

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# Yeo-Johnson transform, elementwise with per-entry gamma in (0, 2)
# ---------------------------------------------------------------------------


def _check_gamma(gamma: np.ndarray) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any((gamma <= 0.0) | (gamma >= 2.0)):
        raise ValueError("gamma must lie strictly inside (0, 2)")
    return gamma


def gamma_from_unconstrained(u: np.ndarray) -> np.ndarray:
    """Map an unconstrained value to gamma in (0, 2); 0 maps to 1."""
    return 2.0 * sigmoid(np.asarray(u, dtype=np.float64))


def yj_forward(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Yeo-Johnson transform t_gamma(x), vectorised over both arguments."""
    gamma = _check_gamma(gamma)
    x = np.asarray(x, dtype=np.float64)
    x, gamma = np.broadcast_arrays(x, gamma)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    g = gamma[pos]
    out[pos] = np.expm1(g * np.log1p(x[pos])) / g
    g2 = 2.0 - gamma[~pos]
    out[~pos] = -np.expm1(g2 * np.log1p(-x[~pos])) / g2
    return out


def yj_inverse(xi: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Inverse Yeo-Johnson transform; exact round trip with yj_forward."""
    gamma = _check_gamma(gamma)
    xi = np.asarray(xi, dtype=np.float64)
    xi, gamma = np.broadcast_arrays(xi, gamma)
    out = np.empty_like(xi, dtype=np.float64)
    pos = xi >= 0
    g = gamma[pos]
    out[pos] = np.expm1(np.log1p(g * xi[pos]) / g)
    g2 = 2.0 - gamma[~pos]
    out[~pos] = -np.expm1(np.log1p(-g2 * xi[~pos]) / g2)
    return out


def yj_derivative(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """dt_gamma/dx, which is (1+x)^(gamma-1) for x >= 0 and (1-x)^(1-gamma) below."""
    gamma = _check_gamma(gamma)
    x = np.asarray(x, dtype=np.float64)
    x, gamma = np.broadcast_arrays(x, gamma)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = np.exp((gamma[pos] - 1.0) * np.log1p(x[pos]))
    out[~pos] = np.exp((1.0 - gamma[~pos]) * np.log1p(-x[~pos]))
    return out


def yj_dgamma(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Partial derivative of t_gamma(x) with respect to gamma at fixed x."""
    gamma = _check_gamma(gamma)
    x = np.asarray(x, dtype=np.float64)
    x, gamma = np.broadcast_arrays(x, gamma)
    t = yj_forward(x, gamma)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    lp = np.log1p(x[pos])
    g = gamma[pos]
    out[pos] = (np.exp(g * lp) * lp - t[pos]) / g
    lm = np.log1p(-x[~pos])
    g2 = 2.0 - gamma[~pos]
    out[~pos] = (np.exp(g2 * lm) * lm + t[~pos]) / g2
    return out


def yj_dlog_derivative(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """d log t'_gamma(x) / dx; equals (gamma-1)/(1+|x|) on both branches."""
    gamma = _check_gamma(gamma)
    x = np.asarray(x, dtype=np.float64)
    x, gamma = np.broadcast_arrays(x, gamma)
    return (gamma - 1.0) / (1.0 + np.abs(x))


# ---------------------------------------------------------------------------
# Gaussian state-pair block (global vector + local path)
# ---------------------------------------------------------------------------


@dataclass
class TbnBlock:
    """Joint Gaussian block q(xi, zeta) with conditional-affine structure.

    q(xi) = N(mu_g, (C_g C_g')^-1) with C_g lower triangular [G, G];
    q(zeta | xi) = N(mu_l, (C_l C_l')^-1) with C_l lower bidiagonal [H, H],
    mu_l = d + C_l^-T dmat (mu_g - xi), and the 2H-1 free entries of C_l
    affine in xi: c = fstar + fmat xi.  Diagonals of both factors are stored
    on the log scale (entries of c at even positions are log C_l[j, j]).
    """

    mu_g: np.ndarray  # [G]
    cstar_g: np.ndarray  # [G, G], lower; diagonal stored as log
    d: np.ndarray  # [H]
    dmat: np.ndarray  # [H, G]
    fstar: np.ndarray  # [2H-1]
    fmat: np.ndarray  # [2H-1, G]

    @property
    def n_globals(self) -> int:
        return self.mu_g.shape[0]

    @property
    def n_locals(self) -> int:
        return self.d.shape[0]

    def n_params(self) -> int:
        g, h = self.n_globals, self.n_locals
        return g + g * (g + 1) // 2 + h + h * g + max(2 * h - 1, 0) * (1 + g)

    def chol_g(self) -> np.ndarray:
        """Dense C_g with the diagonal exponentiated."""
        cg = np.tril(self.cstar_g, -1)
        np.fill_diagonal(cg, safe_exp(np.diag(self.cstar_g)))
        return cg

    def copy(self) -> "TbnBlock":
        return TbnBlock(self.mu_g.copy(), self.cstar_g.copy(), self.d.copy(),
                        self.dmat.copy(), self.fstar.copy(), self.fmat.copy())


@dataclass
class TbnSample:
    """One reparameterised draw from a TbnBlock, with cached solver inputs."""

    xi: np.ndarray  # [G]
    zeta: np.ndarray  # [H]
    eta_g: np.ndarray
    eta_l: np.ndarray
    cl_diag: np.ndarray  # [H] diagonal of C_l
    cl_sub: np.ndarray  # [H-1] subdiagonal of C_l
    cg: np.ndarray  # [G, G]


def _cl_entries(block: TbnBlock, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bidiagonal factor entries at a given xi (even slots = log diagonal)."""
    c = block.fstar + block.fmat @ xi
    return safe_exp(c[0::2]), c[1::2]


def _solve_lower_bidiag(diag: np.ndarray, sub: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve C x = rhs for lower-bidiagonal C."""
    h = diag.shape[0]
    if h == 1:
        return rhs / diag
    ab = np.zeros((2, h))
    ab[0] = diag
    ab[1, :-1] = sub
    return solve_banded((1, 0), ab, rhs, check_finite=False)


def _solve_upper_bidiag(diag: np.ndarray, sub: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve C' x = rhs for lower-bidiagonal C (so C' is upper bidiagonal)."""
    h = diag.shape[0]
    if h == 1:
        return rhs / diag
    ab = np.zeros((2, h))
    ab[0, 1:] = sub
    ab[1] = diag
    return solve_banded((0, 1), ab, rhs, check_finite=False)


def _mul_lower_bidiag(diag: np.ndarray, sub: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = diag * x
    out[1:] += sub * x[:-1]
    return out


def _mul_upper_bidiag(diag: np.ndarray, sub: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = diag * x
    out[:-1] += sub * x[1:]
    return out


def tbn_sample(block: TbnBlock, eta_g: np.ndarray, eta_l: np.ndarray) -> TbnSample:
    """Deterministic map from standard normals (eta_g, eta_l) to (xi, zeta)."""
    cg = block.chol_g()
    xi = block.mu_g + np.linalg.solve(cg.T, eta_g)
    cl_diag, cl_sub = _cl_entries(block, xi)
    w = block.dmat @ (block.mu_g - xi) + eta_l
    zeta = block.d + _solve_upper_bidiag(cl_diag, cl_sub, w)
    return TbnSample(xi=xi, zeta=zeta, eta_g=eta_g, eta_l=eta_l,
                     cl_diag=cl_diag, cl_sub=cl_sub, cg=cg)


def tbn_log_density(
    block: TbnBlock,
    xi: np.ndarray,
    zeta: np.ndarray,
    sample: TbnSample | None = None,
) -> float:
    """log q(xi, zeta).  A matching TbnSample skips the triangular solves."""
    g, h = block.n_globals, block.n_locals
    if sample is not None:
        m_g, m_l = sample.eta_g, sample.eta_l
        cl_diag = sample.cl_diag
        cg_logdiag = np.log(np.diag(sample.cg))
    else:
        cg = block.chol_g()
        m_g = cg.T @ (xi - block.mu_g)
        cl_diag, cl_sub = _cl_entries(block, xi)
        mu_l = block.d + _solve_upper_bidiag(cl_diag, cl_sub, block.dmat @ (block.mu_g - xi))
        m_l = _mul_upper_bidiag(cl_diag, cl_sub, zeta - mu_l)
        cg_logdiag = np.diag(block.cstar_g)
    return float(
        -0.5 * (g + h) * LOG_2PI
        + np.sum(cg_logdiag)
        + np.sum(np.log(cl_diag))
        - 0.5 * (m_g @ m_g + m_l @ m_l)
    )


def tbn_grad_sample(
    block: TbnBlock,
    xi: np.ndarray,
    zeta: np.ndarray,
    sample: TbnSample | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of log q with respect to (xi, zeta) at a point.

    The xi gradient carries the implicit dependence of the conditional factor
    and conditional mean on xi.
    """
    if sample is not None:
        cg = sample.cg
        cl_diag, cl_sub = sample.cl_diag, sample.cl_sub
        m_g, m_l = sample.eta_g, sample.eta_l
    else:
        cg = block.chol_g()
        m_g = cg.T @ (xi - block.mu_g)
        cl_diag, cl_sub = _cl_entries(block, xi)
        mu_l = block.d + _solve_upper_bidiag(cl_diag, cl_sub, block.dmat @ (block.mu_g - xi))
        m_l = _mul_upper_bidiag(cl_diag, cl_sub, zeta - mu_l)
    g_zeta = -_mul_lower_bidiag(cl_diag, cl_sub, m_l)
    # d(sum log C_l,jj)/dxi - quadratic term through C_l(xi) and mu_l(xi)
    zd = zeta - block.d
    kap = np.empty_like(block.fstar)
    kap[0::2] = cl_diag * zd * m_l
    kap[1::2] = zd[1:] * m_l[:-1]
    g_xi = -cg @ m_g + np.sum(block.fmat[0::2], axis=0)
    g_xi -= block.dmat.T @ m_l + block.fmat.T @ kap
    return g_xi, g_zeta


def tbn_param_grads(
    block: TbnBlock, sample: TbnSample, g_xi: np.ndarray, g_zeta: np.ndarray
) -> dict[str, np.ndarray]:
    """Chain a gradient at the sample through the sampling map's parameters.

    Given g = d(target)/d(xi, zeta) at fixed noise, returns d(target)/d(param)
    for every parameter array of the block.
    """
    v = _solve_lower_bidiag(sample.cl_diag, sample.cl_sub, g_zeta)
    zd = sample.zeta - block.d
    kap = np.empty_like(block.fstar)
    kap[0::2] = sample.cl_diag * zd * v
    kap[1::2] = zd[1:] * v[:-1]
    fkap = block.fmat.T @ kap
    g_xi_total = g_xi - block.dmat.T @ v - fkap
    t_vec = sample.xi - block.mu_g  # C_g^-T eta_g
    u = np.linalg.solve(sample.cg, g_xi_total)
    grad_cstar = -np.tril(np.outer(t_vec, u))
    diag_scale = np.diag(sample.cg)
    idx = np.arange(block.n_globals)
    grad_cstar[idx, idx] *= diag_scale
    return {
        "mu_g": g_xi - fkap,
        "cstar_g": grad_cstar,
        "d": g_zeta.copy(),
        "dmat": np.outer(v, block.mu_g - sample.xi),
        "fstar": -kap,
        "fmat": -np.outer(kap, sample.xi),
    }


# ---------------------------------------------------------------------------
# Copula block with Yeo-Johnson margins
# ---------------------------------------------------------------------------


@dataclass
class SrnBlock:
    """Copula block: values = t_gamma^-1(mu + B z + dvec * eta) elementwise.

    gamma is stored unconstrained (gamma = 2 sigmoid(gamma_u)); B is [R, p]
    with the upper triangle of its leading p x p rows structurally zero.
    """

    gamma_u: np.ndarray  # [R]
    mu: np.ndarray  # [R]
    bmat: np.ndarray  # [R, p]
    dvec: np.ndarray  # [R]

    @property
    def n_values(self) -> int:
        return self.mu.shape[0]

    @property
    def rank(self) -> int:
        return self.bmat.shape[1]

    def n_params(self) -> int:
        r, p = self.n_values, self.rank
        return 3 * r + r * p - p * (p - 1) // 2

    def gamma(self) -> np.ndarray:
        return gamma_from_unconstrained(self.gamma_u)

    def copy(self) -> "SrnBlock":
        return SrnBlock(self.gamma_u.copy(), self.mu.copy(),
                        self.bmat.copy(), self.dvec.copy())


def srn_b_mask(r: int, p: int) -> np.ndarray:
    """Free-entry mask of B: false on the structural zeros (col > row)."""
    return np.arange(p)[None, :] <= np.arange(r)[:, None]


@dataclass
class SrnSample:
    """One reparameterised draw from an SrnBlock with cached intermediates."""

    values: np.ndarray  # [R] on the model scale
    xi: np.ndarray  # [R] Gaussian scale
    z: np.ndarray  # [p]
    eta: np.ndarray  # [R]
    tprime: np.ndarray  # [R] t'_gamma(values)


def srn_sample(block: SrnBlock, z: np.ndarray, eta: np.ndarray) -> SrnSample:
    """Deterministic map from standard normals (z, eta) to block values."""
    xi = block.mu + block.bmat @ z + block.dvec * eta
    gamma = block.gamma()
    values = yj_inverse(xi, gamma)
    return SrnSample(values=values, xi=xi, z=z, eta=eta,
                     tprime=yj_derivative(values, gamma))


def woodbury_apply(bmat: np.ndarray, dvec: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(B B' + diag(dvec)^2)^-1 v without forming the R x R matrix."""
    d2inv = 1.0 / dvec**2
    if bmat.shape[1] == 0:
        return d2inv * v
    u = bmat.T @ (d2inv * v)
    m = np.eye(bmat.shape[1]) + bmat.T @ (d2inv[:, None] * bmat)
    return d2inv * v - d2inv * (bmat @ np.linalg.solve(m, u))


def lowrank_logdet(bmat: np.ndarray, dvec: np.ndarray) -> float:
    """log det(B B' + diag(dvec)^2) via the determinant lemma."""
    d2 = dvec**2
    out = float(np.sum(np.log(d2)))
    if bmat.shape[1]:
        m = np.eye(bmat.shape[1]) + bmat.T @ (bmat / d2[:, None])
        sign, extra = np.linalg.slogdet(m)
        if sign <= 0:
            raise np.linalg.LinAlgError("low-rank capacitance matrix not positive definite")
        out += float(extra)
    return out


def srn_log_density(block: SrnBlock, values: np.ndarray) -> float:
    """log q(values): Gaussian on the transformed scale times the YJ Jacobian."""
    gamma = block.gamma()
    xi = yj_forward(values, gamma)
    r = xi - block.mu
    quad = float(r @ woodbury_apply(block.bmat, block.dvec, r))
    tprime = yj_derivative(values, gamma)
    return float(
        -0.5 * block.n_values * LOG_2PI
        - 0.5 * lowrank_logdet(block.bmat, block.dvec)
        - 0.5 * quad
        + np.sum(np.log(tprime))
    )


def srn_grad_values(
    block: SrnBlock, values: np.ndarray, sample: SrnSample | None = None
) -> np.ndarray:
    """Gradient of log q with respect to the values."""
    gamma = block.gamma()
    if sample is not None:
        xi, tprime = sample.xi, sample.tprime
    else:
        xi = yj_forward(values, gamma)
        tprime = yj_derivative(values, gamma)
    s1 = woodbury_apply(block.bmat, block.dvec, xi - block.mu)
    return -tprime * s1 + yj_dlog_derivative(values, gamma)


def srn_param_grads(block: SrnBlock, sample: SrnSample, g: np.ndarray) -> dict[str, np.ndarray]:
    """Chain a gradient at the sampled values through the block parameters."""
    base = g / sample.tprime
    gamma = block.gamma()
    dgam = -base * yj_dgamma(sample.values, gamma) * 0.5 * gamma * (2.0 - gamma)
    grad_b = np.outer(base, sample.z)
    grad_b[~srn_b_mask(block.n_values, block.rank)] = 0.0
    return {
        "gamma_u": dgam,
        "mu": base,
        "bmat": grad_b,
        "dvec": base * sample.eta,
    }


# ---------------------------------------------------------------------------
# Family catalogue and parameter counting
# ---------------------------------------------------------------------------

FAMILIES = ("mf", "q1", "q2", "q3")


@dataclass(frozen=True)
class VariationalSpec:
    """Which approximation family to fit, and its low-rank settings."""

    family: str
    p_beta: int = 4
    p_fpath: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.p_beta < 0 or self.p_fpath < 0:
            raise ValueError("low-rank dimensions must be non-negative")


def _tbn_count(g: int, t: int) -> int:
    return g + g * (g + 1) // 2 + t + t * g + max(2 * t - 1, 0) * (1 + g)


def _srn_count(r: int, p: int) -> int:
    p = min(p, r)
    return 3 * r + r * p - p * (p - 1) // 2


def joint_block_sizes(model: ModelSpec) -> list[int]:
    """Value counts of the per-factor joint (factor path, loadings column) blocks."""
    S, K, T = model.n_series, model.n_factors, model.n_periods
    return [T + (S - k) for k in range(K)]


def count_variational_params(vspec: VariationalSpec, model: ModelSpec) -> int:
    """Exact number of variational parameters under this package's storage rules."""
    S, K, T = model.n_series, model.n_factors, model.n_periods
    if vspec.family == "mf":
        return 2 * (model.n_theta() + model.n_states())
    total = S * _tbn_count(3, T) + K * _tbn_count(2, T)
    if vspec.family == "q1":
        total += K * _srn_count(T, vspec.p_fpath)
        total += _srn_count(model.n_beta_free, vspec.p_beta)
    elif vspec.family == "q2":
        total += sum(_srn_count(r, vspec.p_beta) for r in joint_block_sizes(model))
    elif vspec.family == "q3":
        total += _srn_count(model.n_beta_free, vspec.p_beta)
    if model.is_student_t:
        total += (S + K) * _srn_count(1, 0)
    return total
