"""Sequential updating, predictive draws, portfolio weights, correlations.

Forecasting draws (theta, h_T) from the fitted variational family, propagates
the log-volatility AR(1) processes forward with fresh innovations, and builds
the period covariance Sigma = beta D beta' + V from the propagated states.
Draws are generated in fixed-size chunks, each chunk from its own keyed rng
stream, so results are bit-identical no matter how chunks are scheduled.

Only the last-period state of each block is needed for forecasting, and the
bidiagonal structure of the state blocks makes that marginal an O(1) draw:
the last component of an upper-bidiagonal solve depends on the last right
hand side entry alone.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import logsumexp

from . import model as fsv
from .engine import FittedModel, MfLayout, absorb_rows, beta_column_positions, optimize
from .families import yj_inverse
from .model import LOG_2PI, ModelSpec
from .util import STREAM_FORECAST, derive_seed, safe_exp, sigmoid, stream

CHUNK_SIZE = 8192


# ---------------------------------------------------------------------------
# Sequential updating
# ---------------------------------------------------------------------------


def sequential_update(fitted: FittedModel, y_new: np.ndarray, iters: int = 2000) -> FittedModel:
    """Absorb new observation rows [J, S] and re-optimise the full window.

    The variational parameters warm-start from the previous optimum; new
    periods get the growth initial values.  The optimisation target is the
    full-window posterior, so updating with all data at once from a cold
    start is exactly a batch fit.  The fit is advanced in place and returned.
    """
    y_new = np.asarray(y_new, dtype=np.float64)
    if y_new.ndim != 2 or y_new.shape[1] != fitted.model.n_series:
        raise ValueError(f"new rows must be [J, {fitted.model.n_series}]")
    if y_new.shape[0] == 0:
        return fitted
    absorb_rows(fitted, y_new)
    return optimize(fitted, iters)


# ---------------------------------------------------------------------------
# Posterior draws of (theta, h_T) in chunks
# ---------------------------------------------------------------------------


def _tbn_chunk_draw(block, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n draws of (xi, zeta_T): the globals and the final local state."""
    g = block.n_globals
    cg = block.chol_g()
    eta_g = rng.standard_normal((n, g))
    eta_last = rng.standard_normal(n)
    xi = block.mu_g + np.linalg.solve(cg.T, eta_g.T).T
    t_last = block.n_locals - 1
    diag_slot = 2 * t_last
    cl_last = safe_exp(block.fstar[diag_slot] + xi @ block.fmat[diag_slot])
    w_last = (block.mu_g - xi) @ block.dmat[t_last] + eta_last
    zeta_last = block.d[t_last] + w_last / cl_last
    return xi, zeta_last


def _srn_chunk_draw(block, rng: np.random.Generator, n: int, start: int = 0) -> np.ndarray:
    """n draws of the block values from `start` onward."""
    z = rng.standard_normal((n, block.rank))
    eta = rng.standard_normal((n, block.n_values - start))
    xi = block.mu[start:] + z @ block.bmat[start:].T + eta * block.dvec[start:]
    return yj_inverse(xi, block.gamma()[start:])


def _beta_matrices(beta_free: np.ndarray, model: ModelSpec) -> np.ndarray:
    """Loadings matrices [n, S, K] from free-entry draws [n, n_beta_free]."""
    pairs = fsv.beta_free_index(model)
    rows = np.array([s for s, _ in pairs])
    cols = np.array([k for _, k in pairs])
    vals = np.where(rows == cols, safe_exp(beta_free), beta_free)
    beta = np.zeros((beta_free.shape[0], model.n_series, model.n_factors))
    beta[:, rows, cols] = vals
    return beta


def _mf_forecast_indices(model: ModelSpec) -> dict[str, np.ndarray]:
    """Mean-field coordinates needed for forecasting: theta and last h column."""
    layout = MfLayout(model)
    T = model.n_periods
    out: dict[str, np.ndarray] = {}
    for name in ("kappa_eps", "alpha_eps", "psi_eps", "alpha_f", "psi_f",
                 "beta_free", "vstar_eps", "vstar_f"):
        if name in layout.slices:
            sl = layout.slices[name]
            out[name] = np.arange(sl.start, sl.stop)
    for name, rows in (("h_eps", model.n_series), ("h_f", model.n_factors)):
        start = layout.slices[name].start
        out[name + "_last"] = start + np.arange(rows) * T + (T - 1)
    return out


def _draw_globals_chunk(fitted: FittedModel, rng: np.random.Generator, n: int) -> dict:
    """One chunk of posterior draws of theta (natural pieces) and h_T."""
    model, params = fitted.model, fitted.params
    S, K = model.n_series, model.n_factors
    out: dict[str, np.ndarray] = {}
    if fitted.vspec.family == "mf":
        idx = _mf_forecast_indices(model)
        blk = params.mf
        flat = np.concatenate(list(idx.values()))
        vals = yj_inverse(blk.mu[flat] + rng.standard_normal((n, flat.size)) * blk.dvec[flat],
                          blk.gamma()[flat])
        pos = 0
        for name, ids in idx.items():
            out[name] = vals[:, pos : pos + ids.size]
            pos += ids.size
        out["h_eps_T"] = out.pop("h_eps_last")
        out["h_f_T"] = out.pop("h_f_last")
    else:
        kappa = np.empty((n, S))
        alpha_e = np.empty((n, S))
        psi_e = np.empty((n, S))
        h_eps = np.empty((n, S))
        for s, block in enumerate(params.idio):
            xi, zeta = _tbn_chunk_draw(block, rng, n)
            kappa[:, s], alpha_e[:, s], psi_e[:, s] = xi[:, 0], xi[:, 1], xi[:, 2]
            h_eps[:, s] = zeta
        alpha_f = np.empty((n, K))
        psi_f = np.empty((n, K))
        h_f = np.empty((n, K))
        for k, block in enumerate(params.fvol):
            xi, zeta = _tbn_chunk_draw(block, rng, n)
            alpha_f[:, k], psi_f[:, k] = xi[:, 0], xi[:, 1]
            h_f[:, k] = zeta
        out.update(kappa_eps=kappa, alpha_eps=alpha_e, psi_eps=psi_e,
                   alpha_f=alpha_f, psi_f=psi_f, h_eps_T=h_eps, h_f_T=h_f)
        if params.beta is not None:
            out["beta_free"] = _srn_chunk_draw(params.beta, rng, n)
        else:
            T = model.n_periods
            cols = beta_column_positions(model)
            beta_free = np.empty((n, model.n_beta_free))
            for k, block in enumerate(params.joint):
                beta_free[:, cols[k]] = _srn_chunk_draw(block, rng, n, start=T)
            out["beta_free"] = beta_free
        if model.is_student_t:
            out["vstar_eps"] = np.column_stack(
                [_srn_chunk_draw(b, rng, n)[:, 0] for b in params.dof_eps])
            out["vstar_f"] = np.column_stack(
                [_srn_chunk_draw(b, rng, n)[:, 0] for b in params.dof_f])
    return out


# ---------------------------------------------------------------------------
# Forward propagation
# ---------------------------------------------------------------------------


@dataclass
class ForecastDraws:
    """Posterior predictive draws for periods T+1 .. T+H.

    Step axes are 0-based: index h-1 holds period T+h.  Sigma draws are kept
    in factored form (beta, D diag, V diag); sigma_draw assembles one on
    demand, which keeps memory linear in S.
    """

    horizon: int
    beta: np.ndarray  # [M, S, K]
    v_diag: np.ndarray  # [H, M, S]
    d_diag: np.ndarray  # [H, M, K]
    h_eps: np.ndarray  # [H, M, S]
    h_f: np.ndarray  # [H, M, K]
    f: np.ndarray  # [H, M, K]
    y: np.ndarray  # [H, M, S]
    log_predictive: np.ndarray | None = None  # [H] when observed rows supplied

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def sigma_draw(self, step: int, m: int) -> np.ndarray:
        """Covariance draw Sigma_{T+step+1} for draw m, as a dense [S, S]."""
        b = self.beta[m]
        return (b * self.d_diag[step, m]) @ b.T + np.diag(self.v_diag[step, m])

    def mean_sigma(self, step: int) -> np.ndarray:
        """Average of the Sigma draws at one step."""
        bd = self.beta * self.d_diag[step][:, None, :]  # [M, S, K]
        out = np.einsum("msk,mtk->st", bd, self.beta) / self.n_draws
        out[np.diag_indices_from(out)] += self.v_diag[step].mean(axis=0)
        return out

    def mean_correlation(self, step: int) -> np.ndarray:
        """Average of the correlation-matrix draws at one step."""
        total = np.zeros((self.beta.shape[1], self.beta.shape[1]))
        for m in range(self.n_draws):
            total += correlation_at(self.sigma_draw(step, m))
        return total / self.n_draws


def _chunk_sizes(n_draws: int) -> list[int]:
    sizes = [CHUNK_SIZE] * (n_draws // CHUNK_SIZE)
    if n_draws % CHUNK_SIZE:
        sizes.append(n_draws % CHUNK_SIZE)
    return sizes


def forecast_draws(fitted: FittedModel, horizon: int, n_draws: int, seed: int,
                   y_obs: np.ndarray | None = None, threads: int = 1) -> ForecastDraws:
    """Monte Carlo draws from the H-step posterior predictive distribution.

    Each draw takes (theta, h_T) from the variational posterior, propagates
    the AR(1) log-volatilities forward with fresh innovations, and samples
    factors and returns at each step; Student-t errors draw fresh mixing
    weights from their inverse-gamma prior.  With y_obs [H, S] supplied, the
    per-step log predictive likelihoods are averaged over the draws and
    stored on the result.  Chunks of draws come from independent keyed rng
    streams, so the result is bit-identical for any thread count.
    """
    model = fitted.model
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if n_draws < 1:
        raise ValueError("need at least one draw")
    if threads < 1:
        raise ValueError("need at least one thread")
    if model.n_periods < 1:
        raise ValueError("cannot forecast from a zero-period fit")
    S, K = model.n_series, model.n_factors

    def one_chunk(job: tuple[int, int]) -> dict:
        ci, n = job
        rng = stream(seed, STREAM_FORECAST, ci, 0)
        g = _draw_globals_chunk(fitted, rng, n)
        tau_e = fsv.alpha_to_tau(g["alpha_eps"])
        tau_f = fsv.alpha_to_tau(g["alpha_f"])
        phi_e = sigmoid(g["psi_eps"])
        phi_f = sigmoid(g["psi_f"])
        beta = _beta_matrices(g["beta_free"], model)
        chunk = {
            "beta": beta,
            "v_diag": np.empty((horizon, n, S)), "d_diag": np.empty((horizon, n, K)),
            "h_eps": np.empty((horizon, n, S)), "h_f": np.empty((horizon, n, K)),
            "f": np.empty((horizon, n, K)), "y": np.empty((horizon, n, S)),
        }
        h_e, h_f = g["h_eps_T"], g["h_f_T"]
        for step in range(horizon):
            h_e = phi_e * h_e + rng.standard_normal((n, S))
            h_f = phi_f * h_f + rng.standard_normal((n, K))
            v = safe_exp(tau_e * h_e + g["kappa_eps"])
            d = safe_exp(tau_f * h_f)
            if model.is_student_t:
                half_ve = 0.5 * np.exp(g["vstar_eps"])
                half_vf = 0.5 * np.exp(g["vstar_f"])
                v = v * half_ve / rng.gamma(half_ve)
                d = d * half_vf / rng.gamma(half_vf)
            f = np.sqrt(d) * rng.standard_normal((n, K))
            y = np.einsum("nsk,nk->ns", beta, f) + np.sqrt(v) * rng.standard_normal((n, S))
            chunk["h_eps"][step] = h_e
            chunk["h_f"][step] = h_f
            chunk["v_diag"][step] = v
            chunk["d_diag"][step] = d
            chunk["f"][step] = f
            chunk["y"][step] = y
        return chunk

    jobs = list(enumerate(_chunk_sizes(n_draws)))
    if threads == 1 or len(jobs) == 1:
        pieces = [one_chunk(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pieces = list(pool.map(one_chunk, jobs))
    draws = ForecastDraws(
        horizon=horizon,
        beta=np.concatenate([c["beta"] for c in pieces], axis=0),
        **{name: np.concatenate([c[name] for c in pieces], axis=1)
           for name in ("v_diag", "d_diag", "h_eps", "h_f", "f", "y")},
    )
    if y_obs is not None:
        y_obs = np.atleast_2d(np.asarray(y_obs, dtype=np.float64))
        if y_obs.shape != (horizon, S):
            raise ValueError(f"observed rows must be [{horizon}, {S}]")
        draws.log_predictive = np.array([
            _log_predictive_at(draws, step, y_obs[step]) for step in range(horizon)
        ])
    return draws


def lowrank_gauss_logpdf(y: np.ndarray, beta: np.ndarray, d_diag: np.ndarray,
                         v_diag: np.ndarray) -> np.ndarray:
    """log N(y; 0, beta diag(d) beta' + diag(v)) for a batch of factored draws.

    Evaluated with the matrix inversion and determinant lemmas, so the cost
    per draw is O(S K^2 + K^3) rather than O(S^3).
    """
    k = beta.shape[2]
    vinv = 1.0 / v_diag
    b = np.einsum("nsk,ns->nk", beta, vinv * y)
    a = np.einsum("nsk,ns,nsj->nkj", beta, vinv, beta)
    a[:, np.arange(k), np.arange(k)] += 1.0 / d_diag
    chol = np.linalg.cholesky(a)
    sol = np.linalg.solve(a, b[:, :, None])[:, :, 0]
    quad = np.sum(y**2 * vinv, axis=1) - np.sum(b * sol, axis=1)
    logdet = (np.sum(np.log(v_diag), axis=1) + np.sum(np.log(d_diag), axis=1)
              + 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1))
    return -0.5 * (y.size * LOG_2PI + logdet + quad)


def _log_predictive_at(draws: ForecastDraws, step: int, y_obs: np.ndarray) -> float:
    ll = lowrank_gauss_logpdf(y_obs, draws.beta, draws.d_diag[step], draws.v_diag[step])
    return float(logsumexp(ll) - np.log(draws.n_draws))


def predictive_likelihood(fitted: FittedModel, y_obs: np.ndarray, n_draws: int,
                          seed: int, horizon: int = 1, threads: int = 1) -> float:
    """log of the Monte Carlo averaged predictive density of one return row.

    The default scores the first period past the fitted window; a larger
    horizon propagates the states that many steps before evaluating, which is
    how rows between sequential updates are scored.
    """
    y_obs = np.asarray(y_obs, dtype=np.float64)
    if y_obs.shape != (fitted.model.n_series,):
        raise ValueError(f"observed row must have {fitted.model.n_series} entries")
    draws = forecast_draws(fitted, horizon, n_draws, seed, threads=threads)
    return _log_predictive_at(draws, horizon - 1, y_obs)


def clapl_run(fitted: FittedModel, holdout: np.ndarray, n_draws: int,
              update_frequency: int, seed: int, update_iters: int = 2000,
              threads: int = 1) -> tuple[np.ndarray, FittedModel]:
    """Per-row log predictive likelihoods over a holdout, advancing the fit.

    Every row is scored before it is absorbed, at the horizon implied by the
    current fitted window; after each update_frequency scored rows the fit is
    advanced over exactly those rows.  A trailing partial group stays
    unabsorbed since nothing further is scored.  Each row's draw seed is
    derived from its absolute period index, so aligned runs are additive.
    """
    holdout = np.asarray(holdout, dtype=np.float64)
    if holdout.ndim != 2 or holdout.shape[1] != fitted.model.n_series:
        raise ValueError(f"holdout must be [J, {fitted.model.n_series}]")
    if holdout.shape[0] == 0:
        raise ValueError("holdout is empty")
    if update_frequency < 1:
        raise ValueError("update frequency must be at least 1")
    terms = np.empty(holdout.shape[0])
    pending = 0
    for j in range(holdout.shape[0]):
        horizon = pending + 1
        row_seed = derive_seed(seed, fitted.model.n_periods + horizon)
        terms[j] = predictive_likelihood(fitted, holdout[j], n_draws, row_seed,
                                         horizon=horizon, threads=threads)
        pending += 1
        if pending == update_frequency:
            sequential_update(fitted, holdout[j + 1 - pending : j + 1], iters=update_iters)
            pending = 0
    return terms, fitted


def clapl(fitted: FittedModel, holdout: np.ndarray, n_draws: int,
          update_frequency: int, seed: int, update_iters: int = 2000,
          threads: int = 1) -> float:
    """Cumulative log predictive likelihood over a holdout window."""
    terms, _ = clapl_run(fitted, holdout, n_draws, update_frequency, seed,
                         update_iters, threads=threads)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Portfolio weights and correlations
# ---------------------------------------------------------------------------


def _check_square(sigma: np.ndarray) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError("covariance matrix must be square")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("covariance matrix contains non-finite values")
    return sigma


def min_variance_weights(sigma: np.ndarray) -> np.ndarray:
    """Minimum-variance portfolio weights Sigma^-1 1 / (1' Sigma^-1 1)."""
    sigma = _check_square(sigma)
    scale = np.max(np.abs(sigma))
    if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-8 * max(scale, 1.0)):
        raise ValueError("covariance matrix is not symmetric")
    try:
        factor = cho_factor(sigma, check_finite=False)
    except LinAlgError as exc:
        raise ValueError("covariance matrix is not positive definite") from exc
    w = cho_solve(factor, np.ones(sigma.shape[0]), check_finite=False)
    return w / np.sum(w)


def correlation_at(sigma: np.ndarray) -> np.ndarray:
    """Correlation matrix diag(Sigma)^-1/2 Sigma diag(Sigma)^-1/2."""
    sigma = _check_square(sigma)
    d = np.diag(sigma)
    if np.any(d <= 0.0):
        raise ValueError("covariance diagonal must be positive")
    s = 1.0 / np.sqrt(d)
    return sigma * np.outer(s, s)
