"""Stochastic-gradient variational fitting engine.

One iteration draws every variational block once (common random numbers
across blocks), plugs the draws into the model's analytic log-joint
gradients, subtracts each block's own log-density gradient, pushes the
difference through the sampling maps' parameter chain rules, and applies an
ADAM update to every parameter array.  Exact-conditional variables (factor
paths in the third family, Student-t mixing weights always) are redrawn each
iteration and carry no variational parameters.

Fitting is organised so that a batch fit and a sequential update run the same
code: a fit starts from a zero-period parameter set and grows it to the full
panel length, which is exactly what absorbing new observations does later.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as fsv
from .families import (
    SrnBlock,
    SrnSample,
    TbnBlock,
    TbnSample,
    VariationalSpec,
    srn_grad_values,
    srn_log_density,
    srn_param_grads,
    srn_sample,
    tbn_grad_sample,
    tbn_log_density,
    tbn_param_grads,
    tbn_sample,
)
from .model import LatentStates, ModelSpec, ThetaReal
from .util import (
    STREAM_BETA,
    STREAM_DOF_EPS,
    STREAM_DOF_F,
    STREAM_ELBO,
    STREAM_FACTOR_DRAW,
    STREAM_FPATH,
    STREAM_FVOL,
    STREAM_IDIO,
    STREAM_INIT,
    STREAM_JOINT,
    STREAM_MF,
    STREAM_MIXING_DRAW,
    STREAM_PILOT_DRAW,
    clamp_monitor,
    derive_seed,
    panel_fingerprint,
    stream,
)

# Order of the global entries inside each TBN block.
IDIO_GLOBALS = ("kappa", "alpha", "psi")
FVOL_GLOBALS = ("alpha", "psi")

TBN_FIELDS = ("mu_g", "cstar_g", "d", "dmat", "fstar", "fmat")
SRN_FIELDS = ("gamma_u", "mu", "bmat", "dvec")
MF_FIELDS = ("mu", "dvec")  # mean-field pins gamma at 1 and has no B


# ---------------------------------------------------------------------------
# ADAM
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-array ADAM accumulators with the step-size constants."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 0.001
    tau1: float = 0.9
    tau2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_array(cls, arr: np.ndarray, alpha: float = 0.001, tau1: float = 0.9,
                  tau2: float = 0.99, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(arr), v=np.zeros_like(arr),
                   alpha=alpha, tau1=tau1, tau2=tau2, eps=eps)


def adam_update(state: AdamState, g: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected ADAM step; returns the delta to ADD (ascent)."""
    state.t += 1
    state.m = state.tau1 * state.m + (1.0 - state.tau1) * g
    state.v = state.tau2 * state.v + (1.0 - state.tau2) * g**2
    m_hat = state.m / (1.0 - state.tau1**state.t)
    v_hat = state.v / (1.0 - state.tau2**state.t)
    delta = state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return delta, state


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class VariationalParams:
    """Every block of the chosen family; unused groups stay empty."""

    idio: list[TbnBlock] = field(default_factory=list)
    fvol: list[TbnBlock] = field(default_factory=list)
    beta: SrnBlock | None = None
    fpath: list[SrnBlock] = field(default_factory=list)
    joint: list[SrnBlock] = field(default_factory=list)
    mf: SrnBlock | None = None
    dof_eps: list[SrnBlock] = field(default_factory=list)
    dof_f: list[SrnBlock] = field(default_factory=list)

    def named_blocks(self):
        """Yield ((group, index), block) for every block present."""
        for s, b in enumerate(self.idio):
            yield ("idio", s), b
        for k, b in enumerate(self.fvol):
            yield ("fvol", k), b
        if self.beta is not None:
            yield ("beta", 0), self.beta
        for k, b in enumerate(self.fpath):
            yield ("fpath", k), b
        for k, b in enumerate(self.joint):
            yield ("joint", k), b
        if self.mf is not None:
            yield ("mf", 0), self.mf
        for s, b in enumerate(self.dof_eps):
            yield ("dof_eps", s), b
        for k, b in enumerate(self.dof_f):
            yield ("dof_f", k), b


def updatable_fields(group: str, block) -> tuple[str, ...]:
    if isinstance(block, TbnBlock):
        return TBN_FIELDS
    return MF_FIELDS if group == "mf" else SRN_FIELDS


def free_param_count(params: VariationalParams) -> int:
    """Number of optimisable scalars, honouring structural zeros."""
    total = 0
    for (group, _), block in params.named_blocks():
        if isinstance(block, TbnBlock):
            total += block.n_params()
        elif group == "mf":
            total += block.mu.size + block.dvec.size
        else:
            total += block.n_params()
    return total


class MfLayout:
    """Positions of the model's parameters and states inside the mean-field vector.

    Order: kappa_eps, alpha_eps, psi_eps, alpha_f, psi_f, beta_free,
    [vstar_eps, vstar_f,] h_eps (row-major [S, T]), h_f, f.
    """

    def __init__(self, spec: ModelSpec) -> None:
        S, K, T = spec.n_series, spec.n_factors, spec.n_periods
        self.spec = spec
        names = ["kappa_eps", "alpha_eps", "psi_eps", "alpha_f", "psi_f", "beta_free"]
        sizes = [S, S, S, K, K, spec.n_beta_free]
        if spec.is_student_t:
            names += ["vstar_eps", "vstar_f"]
            sizes += [S, K]
        names += ["h_eps", "h_f", "f"]
        sizes += [S * T, K * T, K * T]
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in zip(names, sizes):
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def split(self, vec: np.ndarray) -> tuple[ThetaReal, LatentStates]:
        S, K, T = self.spec.n_series, self.spec.n_factors, self.spec.n_periods
        sl = self.slices
        theta = ThetaReal(
            kappa_eps=vec[sl["kappa_eps"]], alpha_eps=vec[sl["alpha_eps"]],
            psi_eps=vec[sl["psi_eps"]], alpha_f=vec[sl["alpha_f"]],
            psi_f=vec[sl["psi_f"]], beta_free=vec[sl["beta_free"]],
        )
        if self.spec.is_student_t:
            theta.vstar_eps = vec[sl["vstar_eps"]]
            theta.vstar_f = vec[sl["vstar_f"]]
        x = LatentStates(
            h_eps=vec[sl["h_eps"]].reshape(S, T),
            h_f=vec[sl["h_f"]].reshape(K, T),
            f=vec[sl["f"]].reshape(K, T),
        )
        return theta, x

    def join_grad(self, g: fsv.GradLogJoint) -> np.ndarray:
        parts = [g.kappa_eps, g.alpha_eps, g.psi_eps, g.alpha_f, g.psi_f, g.beta_free]
        if self.spec.is_student_t:
            parts += [g.vstar_eps, g.vstar_f]
        parts += [g.h_eps.ravel(), g.h_f.ravel(), g.f.ravel()]
        return np.concatenate(parts)


def beta_column_positions(spec: ModelSpec) -> list[np.ndarray]:
    """Positions of each loading column's entries inside the beta_free vector."""
    pairs = fsv.beta_free_index(spec)
    return [np.array([i for i, (_, kk) in enumerate(pairs) if kk == k], dtype=np.intp)
            for k in range(spec.n_factors)]


# ---------------------------------------------------------------------------
# Initialisation and growth
# ---------------------------------------------------------------------------


def _empty_tbn(g: int) -> TbnBlock:
    return TbnBlock(mu_g=np.zeros(g), cstar_g=np.zeros((g, g)), d=np.zeros(0),
                    dmat=np.zeros((0, g)), fstar=np.zeros(0), fmat=np.zeros((0, g)))


def _empty_srn(r: int, p: int) -> SrnBlock:
    return SrnBlock(gamma_u=np.zeros(r), mu=np.zeros(r),
                    bmat=np.zeros((r, p)), dvec=np.full(r, 0.1))


def init_params(model: ModelSpec, vspec: VariationalSpec, master_seed: int) -> VariationalParams:
    """Fresh zero-period parameter set; random draws only on time-invariant means.

    Means of time-invariant coordinates start at N(0, 0.01^2) (degrees of
    freedom at log 25 plus that noise, matching the prior mean); everything
    else starts at the deterministic values that make each block a standard
    Gaussian: identity Cholesky factors, zero couplings, copula curvature 1.
    """
    if model.n_periods != 0:
        raise ValueError("init_params expects a zero-period model; grow afterwards")
    rng = stream(master_seed, STREAM_INIT, 0, 0)
    S, K = model.n_series, model.n_factors
    params = VariationalParams()
    if vspec.family != "mf":
        for _ in range(S):
            blk = _empty_tbn(3)
            blk.mu_g = rng.normal(0.0, 0.01, 3)
            params.idio.append(blk)
        for _ in range(K):
            blk = _empty_tbn(2)
            blk.mu_g = rng.normal(0.0, 0.01, 2)
            params.fvol.append(blk)
    if vspec.family in ("q1", "q3"):
        blk = _empty_srn(model.n_beta_free, min(vspec.p_beta, model.n_beta_free))
        blk.mu = rng.normal(0.0, 0.01, model.n_beta_free)
        params.beta = blk
    if vspec.family == "q1":
        params.fpath = [_empty_srn(0, min(vspec.p_fpath, 0)) for _ in range(K)]
    if vspec.family == "q2":
        cols = beta_column_positions(model)
        for k in range(K):
            r = cols[k].size  # zero periods: the block holds only the loading column
            blk = _empty_srn(r, min(vspec.p_beta, r))
            blk.mu = rng.normal(0.0, 0.01, r)
            params.joint.append(blk)
    if vspec.family == "mf":
        layout = MfLayout(model)
        blk = _empty_srn(layout.size, 0)
        blk.mu = rng.normal(0.0, 0.01, layout.size)
        params.mf = blk
    if model.is_student_t:
        if vspec.family == "mf":
            # dof coordinates live inside the mean-field block; fix their means
            layout = MfLayout(model)
            for name in ("vstar_eps", "vstar_f"):
                sl = layout.slices[name]
                params.mf.mu[sl] = np.log(25.0) + rng.normal(0.0, 0.01, sl.stop - sl.start)
        else:
            for _ in range(S):
                blk = _empty_srn(1, 0)
                blk.mu = np.log(25.0) + rng.normal(0.0, 0.01, 1)
                params.dof_eps.append(blk)
            for _ in range(K):
                blk = _empty_srn(1, 0)
                blk.mu = np.log(25.0) + rng.normal(0.0, 0.01, 1)
                params.dof_f.append(blk)
    return params


def init_adam(params: VariationalParams, alpha: float = 0.001, tau1: float = 0.9,
              tau2: float = 0.99, eps: float = 1e-8) -> dict:
    adam: dict = {}
    for key, block in params.named_blocks():
        adam[key] = {
            name: AdamState.for_array(getattr(block, name), alpha, tau1, tau2, eps)
            for name in updatable_fields(key[0], block)
        }
    return adam


def _grow_fstar(old: np.ndarray, t_old: int, t_new: int) -> np.ndarray:
    """Extend the bidiagonal entry vector, repeating the last diagonal and
    subdiagonal values for new periods (zeros when there is no history)."""
    new = np.zeros(max(2 * t_new - 1, 0))
    if t_old >= 1:
        new[: 2 * t_old - 1] = old
        last_diag = old[2 * (t_old - 1)]
        last_sub = old[2 * t_old - 3] if t_old >= 2 else 0.0
        idx = np.arange(2 * t_old - 1, 2 * t_new - 1)
        new[idx[idx % 2 == 0]] = last_diag
        new[idx[idx % 2 == 1]] = last_sub
    return new


def _append(arr: np.ndarray, extra_shape: tuple, fill: float = 0.0) -> np.ndarray:
    return np.concatenate([arr, np.full(extra_shape, fill)], axis=0)


def _grow_tbn(block: TbnBlock, adam_fields: dict, t_old: int, t_new: int) -> None:
    g = block.n_globals
    dt = t_new - t_old
    last = block.d[-1] if t_old >= 1 else 0.0
    block.d = _append(block.d, (dt,), last)
    block.dmat = _append(block.dmat, (dt, g))
    block.fstar = _grow_fstar(block.fstar, t_old, t_new)
    block.fmat = _append(block.fmat, (2 * t_new - 1 - max(2 * t_old - 1, 0), g))
    for name in ("d", "dmat", "fstar", "fmat"):
        st = adam_fields[name]
        st.m = _append(st.m, (getattr(block, name).shape[0] - st.m.shape[0],) + st.m.shape[1:])
        st.v = _append(st.v, (getattr(block, name).shape[0] - st.v.shape[0],) + st.v.shape[1:])


def _grow_rank(block: SrnBlock, adam_fields: dict, p_new: int) -> None:
    """Widen the low-rank factor with zero columns (new loadings start inert)."""
    dp = p_new - block.rank
    if dp <= 0:
        return
    block.bmat = np.concatenate([block.bmat, np.zeros((block.n_values, dp))], axis=1)
    st = adam_fields["bmat"]
    st.m = np.concatenate([st.m, np.zeros((st.m.shape[0], dp))], axis=1)
    st.v = np.concatenate([st.v, np.zeros((st.v.shape[0], dp))], axis=1)


def _grow_fpath(block: SrnBlock, adam_fields: dict, t_old: int, t_new: int,
                p_max: int) -> None:
    dt = t_new - t_old
    block.gamma_u = _append(block.gamma_u, (dt,))
    block.mu = _append(block.mu, (dt,))
    block.dvec = _append(block.dvec, (dt,), 0.1)
    block.bmat = _append(block.bmat, (dt, block.rank))
    for name, st in adam_fields.items():
        st.m = _append(st.m, (dt,) + st.m.shape[1:])
        st.v = _append(st.v, (dt,) + st.v.shape[1:])
    _grow_rank(block, adam_fields, min(p_max, block.n_values))


def _grow_joint(block: SrnBlock, adam_fields: dict, t_old: int, t_new: int,
                p_max: int) -> None:
    """Insert new factor-path entries ahead of the loading-column tail."""
    dt = t_new - t_old
    pos = [t_old] * dt
    block.gamma_u = np.insert(block.gamma_u, pos, 0.0)
    block.mu = np.insert(block.mu, pos, 0.0)
    block.dvec = np.insert(block.dvec, pos, 0.1)
    block.bmat = np.insert(block.bmat, pos, 0.0, axis=0)
    for st in adam_fields.values():
        st.m = np.insert(st.m, pos, 0.0, axis=0)
        st.v = np.insert(st.v, pos, 0.0, axis=0)
    _grow_rank(block, adam_fields, min(p_max, block.n_values))


def _mf_regrow_vec(vec: np.ndarray, old: MfLayout, new: MfLayout,
                   h_mode: str, state_fill: float, f_fill: float) -> np.ndarray:
    """Relayout a mean-field vector onto a longer time axis."""
    spec_o, spec_n = old.spec, new.spec
    out = np.zeros(new.size)
    for name, sl in old.slices.items():
        if name in ("h_eps", "h_f", "f"):
            continue
        out[new.slices[name]] = vec[sl]
    for name, rows in (("h_eps", spec_o.n_series), ("h_f", spec_o.n_factors),
                       ("f", spec_o.n_factors)):
        blk_new = np.zeros((rows, spec_n.n_periods))
        if name == "f":
            blk_new[:] = f_fill
        else:
            blk_new[:] = state_fill
        if spec_o.n_periods:
            blk_old = vec[old.slices[name]].reshape(rows, spec_o.n_periods)
            blk_new[:, : spec_o.n_periods] = blk_old
            if name != "f" and h_mode == "copy":
                blk_new[:, spec_o.n_periods:] = blk_old[:, -1:]
        out[new.slices[name]] = blk_new.ravel()
    return out


def grow_params(params: VariationalParams, adam: dict, vspec: VariationalSpec,
                model_old: ModelSpec, model_new: ModelSpec) -> None:
    """Extend every time-indexed array from model_old.T to model_new.T in place.

    New-period initial values: TBN local offsets copy the last period, the
    bidiagonal Cholesky entries repeat the last period's pair, couplings start
    at zero; copula factor-path entries start at (gamma 1, mean 0, sd 0.1);
    mean-field volatility states copy the last period and factor entries start
    at (0, 0.1).  ADAM moments for new entries start at zero.
    """
    t_old, t_new = model_old.n_periods, model_new.n_periods
    if t_new < t_old:
        raise ValueError("cannot shrink the fitted window")
    if t_new == t_old:
        return
    for s, block in enumerate(params.idio):
        _grow_tbn(block, adam[("idio", s)], t_old, t_new)
    for k, block in enumerate(params.fvol):
        _grow_tbn(block, adam[("fvol", k)], t_old, t_new)
    for k, block in enumerate(params.fpath):
        _grow_fpath(block, adam[("fpath", k)], t_old, t_new, vspec.p_fpath)
    for k, block in enumerate(params.joint):
        _grow_joint(block, adam[("joint", k)], t_old, t_new, vspec.p_beta)
    if params.mf is not None:
        old_l, new_l = MfLayout(model_old), MfLayout(model_new)
        blk = params.mf
        blk.gamma_u = np.zeros(new_l.size)
        blk.bmat = np.zeros((new_l.size, 0))
        blk.mu = _mf_regrow_vec(blk.mu, old_l, new_l, "copy", 0.0, 0.0)
        blk.dvec = _mf_regrow_vec(blk.dvec, old_l, new_l, "copy", 0.1, 0.1)
        for st in adam[("mf", 0)].values():
            st.m = _mf_regrow_vec(st.m, old_l, new_l, "zero", 0.0, 0.0)
            st.v = _mf_regrow_vec(st.v, old_l, new_l, "zero", 0.0, 0.0)


# ---------------------------------------------------------------------------
# Per-iteration draws
# ---------------------------------------------------------------------------


@dataclass
class IterationDraw:
    """Everything sampled in one pass: block draws plus assembled model point."""

    theta: ThetaReal
    x: LatentStates
    idio: list[TbnSample]
    fvol: list[TbnSample]
    beta: SrnSample | None = None
    fpath: list[SrnSample] = field(default_factory=list)
    joint: list[SrnSample] = field(default_factory=list)
    mf: SrnSample | None = None
    dof_eps: list[SrnSample] = field(default_factory=list)
    dof_f: list[SrnSample] = field(default_factory=list)
    pilot_f: np.ndarray | None = None  # factors the mixing weights conditioned on


def draw_iteration(model: ModelSpec, vspec: VariationalSpec, params: VariationalParams,
                   y: np.ndarray, master_seed: int, iteration: int) -> IterationDraw:
    """Draw every block for one iteration from its keyed rng stream.

    y is the [S, T] panel; it enters only through the exact conditionals
    (factors for the third family, Student-t mixing weights).
    """
    S, K, T = model.n_series, model.n_factors, model.n_periods

    if vspec.family == "mf":
        layout = MfLayout(model)
        rng = stream(master_seed, STREAM_MF, 0, iteration)
        smp = srn_sample(params.mf, rng.standard_normal(0), rng.standard_normal(layout.size))
        theta, x = layout.split(smp.values)
        draw = IterationDraw(theta=theta, x=x, idio=[], fvol=[], mf=smp)
    else:
        kappa = np.empty(S)
        alpha_e = np.empty(S)
        psi_e = np.empty(S)
        h_eps = np.empty((S, T))
        idio_samples: list[TbnSample] = []
        for s, block in enumerate(params.idio):
            rng = stream(master_seed, STREAM_IDIO, s, iteration)
            smp = tbn_sample(block, rng.standard_normal(3), rng.standard_normal(T))
            kappa[s], alpha_e[s], psi_e[s] = smp.xi
            h_eps[s] = smp.zeta
            idio_samples.append(smp)
        alpha_f = np.empty(K)
        psi_f = np.empty(K)
        h_f = np.empty((K, T))
        fvol_samples: list[TbnSample] = []
        for k, block in enumerate(params.fvol):
            rng = stream(master_seed, STREAM_FVOL, k, iteration)
            smp = tbn_sample(block, rng.standard_normal(2), rng.standard_normal(T))
            alpha_f[k], psi_f[k] = smp.xi
            h_f[k] = smp.zeta
            fvol_samples.append(smp)
        theta = ThetaReal(kappa_eps=kappa, alpha_eps=alpha_e, psi_eps=psi_e,
                          alpha_f=alpha_f, psi_f=psi_f,
                          beta_free=np.empty(model.n_beta_free))
        x = LatentStates(h_eps=h_eps, h_f=h_f, f=np.zeros((K, T)))
        draw = IterationDraw(theta=theta, x=x, idio=idio_samples, fvol=fvol_samples)

        if vspec.family in ("q1", "q3"):
            rng = stream(master_seed, STREAM_BETA, 0, iteration)
            blk = params.beta
            smp = srn_sample(blk, rng.standard_normal(blk.rank),
                             rng.standard_normal(blk.n_values))
            theta.beta_free = smp.values.copy()
            draw.beta = smp
        if vspec.family == "q1":
            for k, blk in enumerate(params.fpath):
                rng = stream(master_seed, STREAM_FPATH, k, iteration)
                smp = srn_sample(blk, rng.standard_normal(blk.rank), rng.standard_normal(T))
                x.f[k] = smp.values
                draw.fpath.append(smp)
        if vspec.family == "q2":
            cols = beta_column_positions(model)
            for k, blk in enumerate(params.joint):
                rng = stream(master_seed, STREAM_JOINT, k, iteration)
                smp = srn_sample(blk, rng.standard_normal(blk.rank),
                                 rng.standard_normal(blk.n_values))
                x.f[k] = smp.values[:T]
                theta.beta_free[cols[k]] = smp.values[T:]
                draw.joint.append(smp)
        if model.is_student_t:
            for s, blk in enumerate(params.dof_eps):
                rng = stream(master_seed, STREAM_DOF_EPS, s, iteration)
                smp = srn_sample(blk, rng.standard_normal(0), rng.standard_normal(1))
                draw.dof_eps.append(smp)
            for k, blk in enumerate(params.dof_f):
                rng = stream(master_seed, STREAM_DOF_F, k, iteration)
                smp = srn_sample(blk, rng.standard_normal(0), rng.standard_normal(1))
                draw.dof_f.append(smp)
            theta.vstar_eps = np.array([d.values[0] for d in draw.dof_eps])
            theta.vstar_f = np.array([d.values[0] for d in draw.dof_f])

    if T == 0:
        return draw

    has_var_f = vspec.family in ("q1", "q2", "mf")
    if model.is_student_t:
        if has_var_f:
            pilot = x.f
        else:
            ones = LatentStates(h_eps=x.h_eps, h_f=x.h_f, f=x.f,
                                w_eps=np.ones((S, T)), w_f=np.ones((K, T)))
            eta = stream(master_seed, STREAM_PILOT_DRAW, 0, iteration).standard_normal((K, T))
            pilot = fsv.draw_factors(theta, ones, y, model, eta)
        draw.pilot_f = pilot
        x_pilot = LatentStates(h_eps=x.h_eps, h_f=x.h_f, f=pilot)
        rng = stream(master_seed, STREAM_MIXING_DRAW, 0, iteration)
        x.w_eps, x.w_f = fsv.sample_mixing_weights(theta, x_pilot, y, model, rng)
    if not has_var_f:
        eta = stream(master_seed, STREAM_FACTOR_DRAW, 0, iteration).standard_normal((K, T))
        x.f = fsv.draw_factors(theta, x, y, model, eta)
    return draw


# ---------------------------------------------------------------------------
# Gradient assembly and the ELBO estimators
# ---------------------------------------------------------------------------


def _log_q_total(vspec: VariationalSpec, params: VariationalParams, draw: IterationDraw) -> float:
    total = 0.0
    for smp, block in zip(draw.idio, params.idio):
        total += tbn_log_density(block, smp.xi, smp.zeta, sample=smp)
    for smp, block in zip(draw.fvol, params.fvol):
        total += tbn_log_density(block, smp.xi, smp.zeta, sample=smp)
    if draw.beta is not None:
        total += srn_log_density(params.beta, draw.beta.values)
    for smp, block in zip(draw.fpath, params.fpath):
        total += srn_log_density(block, smp.values)
    for smp, block in zip(draw.joint, params.joint):
        total += srn_log_density(block, smp.values)
    if draw.mf is not None:
        total += srn_log_density(params.mf, draw.mf.values)
    for smp, block in zip(draw.dof_eps, params.dof_eps):
        total += srn_log_density(block, smp.values)
    for smp, block in zip(draw.dof_f, params.dof_f):
        total += srn_log_density(block, smp.values)
    return total


def elbo_sample(model: ModelSpec, vspec: VariationalSpec, params: VariationalParams,
                draw: IterationDraw, y: np.ndarray) -> float:
    """Single-draw lower-bound estimate matching the family's estimator.

    Families with variational factors use log h - log q directly (Student-t
    additionally cancels the mixing-weight terms against their exact
    conditional).  The third family replaces the factor terms with the
    analytic factor-marginal likelihood; under Student-t errors the mixing
    conditional is evaluated at the pilot factors, giving a conservative
    (still valid) bound.
    """
    theta, x = draw.theta, draw.x
    log_q = _log_q_total(vspec, params, draw)
    if vspec.family in ("q1", "q2", "mf"):
        value = fsv.log_joint(theta, x, y, model) - log_q
        if model.is_student_t:
            value -= fsv.mixing_conditional_logpdf(theta, x, y, model, x.w_eps, x.w_f)
        return value
    parts = fsv.log_joint_parts(theta, x, y, model)
    value = fsv.log_lik_marginal_f(theta, x, y, model)
    value += parts.states + parts.theta_prior - log_q
    if model.is_student_t:
        value += parts.mixing
        x_pilot = LatentStates(h_eps=x.h_eps, h_f=x.h_f, f=draw.pilot_f)
        value -= fsv.mixing_conditional_logpdf(theta, x_pilot, y, model, x.w_eps, x.w_f)
    return value


def point_gradients(model: ModelSpec, vspec: VariationalSpec, params: VariationalParams,
                    draw: IterationDraw, y: np.ndarray) -> dict:
    """Per-block parameter gradients of the single-sample ELBO estimator."""
    theta, x = draw.theta, draw.x
    has_var_f = vspec.family in ("q1", "q2", "mf")
    g = fsv.grad_log_joint(theta, x, y, model, include_f=has_var_f)
    out: dict = {}
    for s, (smp, block) in enumerate(zip(draw.idio, params.idio)):
        q_xi, q_zeta = tbn_grad_sample(block, smp.xi, smp.zeta, sample=smp)
        g_xi = np.array([g.kappa_eps[s], g.alpha_eps[s], g.psi_eps[s]]) - q_xi
        out[("idio", s)] = tbn_param_grads(block, smp, g_xi, g.h_eps[s] - q_zeta)
    for k, (smp, block) in enumerate(zip(draw.fvol, params.fvol)):
        q_xi, q_zeta = tbn_grad_sample(block, smp.xi, smp.zeta, sample=smp)
        g_xi = np.array([g.alpha_f[k], g.psi_f[k]]) - q_xi
        out[("fvol", k)] = tbn_param_grads(block, smp, g_xi, g.h_f[k] - q_zeta)
    if draw.beta is not None:
        g_vals = g.beta_free - srn_grad_values(params.beta, draw.beta.values, sample=draw.beta)
        out[("beta", 0)] = srn_param_grads(params.beta, draw.beta, g_vals)
    if draw.fpath:
        for k, (smp, block) in enumerate(zip(draw.fpath, params.fpath)):
            g_vals = g.f[k] - srn_grad_values(block, smp.values, sample=smp)
            out[("fpath", k)] = srn_param_grads(block, smp, g_vals)
    if draw.joint:
        cols = beta_column_positions(model)
        for k, (smp, block) in enumerate(zip(draw.joint, params.joint)):
            g_h = np.concatenate([g.f[k], g.beta_free[cols[k]]])
            g_vals = g_h - srn_grad_values(block, smp.values, sample=smp)
            out[("joint", k)] = srn_param_grads(block, smp, g_vals)
    if draw.mf is not None:
        layout = MfLayout(model)
        g_vals = layout.join_grad(g) - srn_grad_values(params.mf, draw.mf.values, sample=draw.mf)
        out[("mf", 0)] = srn_param_grads(params.mf, draw.mf, g_vals)
    for s, (smp, block) in enumerate(zip(draw.dof_eps, params.dof_eps)):
        g_vals = g.vstar_eps[s : s + 1] - srn_grad_values(block, smp.values, sample=smp)
        out[("dof_eps", s)] = srn_param_grads(block, smp, g_vals)
    for k, (smp, block) in enumerate(zip(draw.dof_f, params.dof_f)):
        g_vals = g.vstar_f[k : k + 1] - srn_grad_values(block, smp.values, sample=smp)
        out[("dof_f", k)] = srn_param_grads(block, smp, g_vals)
    return out


# ---------------------------------------------------------------------------
# Fitting loop
# ---------------------------------------------------------------------------


@dataclass
class FitDiagnostics:
    """Counters accumulated over every optimisation step of a model's life."""

    total_steps: int = 0
    rejected_steps: int = 0
    clamp_events: int = 0

    @property
    def unstable(self) -> bool:
        return self.total_steps > 0 and self.rejected_steps > 0.01 * self.total_steps


@dataclass
class FittedModel:
    """A variational fit: parameters, optimiser state, trace, and identity."""

    model: ModelSpec
    vspec: VariationalSpec
    params: VariationalParams
    adam: dict
    elbo_trace: list[float]
    iterations_run: int
    master_seed: int
    data_fingerprint: str
    diagnostics: FitDiagnostics
    panel: np.ndarray | None  # [T, S]; not serialised, reattached on load

    def final_elbo(self, window: int = 5000) -> tuple[float, float]:
        """Mean and standard deviation of the last `window` trace values."""
        tail = np.asarray(self.elbo_trace[-window:], dtype=np.float64)
        if tail.size == 0:
            return float("nan"), float("nan")
        return float(np.nanmean(tail)), float(np.nanstd(tail))


def sgd_step(fitted: FittedModel) -> float:
    """One stochastic-gradient step over every block; returns the ELBO sample.

    A step whose gradient or bound estimate is non-finite is rejected: the
    parameters and ADAM moments stay untouched and the rejection is counted.
    """
    model, vspec, params = fitted.model, fitted.vspec, fitted.params
    y = fitted.panel.T
    it = fitted.iterations_run
    fitted.diagnostics.total_steps += 1
    value = float("nan")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"), clamp_monitor() as mon:
        try:
            draw = draw_iteration(model, vspec, params, y, fitted.master_seed, it)
            grads = point_gradients(model, vspec, params, draw, y)
            value = elbo_sample(model, vspec, params, draw, y)
            ok = np.isfinite(value)
            if ok:
                for block_grads in grads.values():
                    for arr in block_grads.values():
                        if not np.all(np.isfinite(arr)):
                            ok = False
                            break
                    if not ok:
                        break
        except (ValueError, np.linalg.LinAlgError):
            # EvaluationError, a singular solve, or a saturated copula
            # curvature all mean this draw cannot be used
            ok = False
    fitted.diagnostics.clamp_events += mon.events
    if not ok:
        fitted.diagnostics.rejected_steps += 1
        fitted.elbo_trace.append(float("nan"))
        fitted.iterations_run += 1
        return float("nan")
    for key, block in params.named_blocks():
        block_grads = grads[key]
        states = fitted.adam[key]
        for name in updatable_fields(key[0], block):
            delta, _ = adam_update(states[name], block_grads[name])
            setattr(block, name, getattr(block, name) + delta)
    fitted.elbo_trace.append(value)
    fitted.iterations_run += 1
    return value


def optimize(fitted: FittedModel, iters: int) -> FittedModel:
    """Run `iters` further steps in place and return the same object."""
    if iters < 0:
        raise ValueError("negative iteration count")
    if iters and fitted.panel is None:
        raise ValueError("no panel attached to this fit")
    if iters and fitted.model.n_periods == 0:
        raise ValueError("cannot optimise a zero-period fit")
    for _ in range(iters):
        sgd_step(fitted)
    return fitted


def cold_start(model: ModelSpec, vspec: VariationalSpec, master_seed: int,
               adam_alpha: float = 0.001, adam_tau1: float = 0.9,
               adam_tau2: float = 0.99, adam_eps: float = 1e-8) -> FittedModel:
    """Zero-period fitted state: fresh parameters, empty panel, no steps run."""
    base = model.with_periods(0)
    params = init_params(base, vspec, master_seed)
    adam = init_adam(params, adam_alpha, adam_tau1, adam_tau2, adam_eps)
    empty = np.zeros((0, model.n_series))
    return FittedModel(
        model=base, vspec=vspec, params=params, adam=adam, elbo_trace=[],
        iterations_run=0, master_seed=master_seed,
        data_fingerprint=panel_fingerprint(empty),
        diagnostics=FitDiagnostics(), panel=empty,
    )


def absorb_rows(fitted: FittedModel, rows: np.ndarray) -> FittedModel:
    """Append observation rows [J, S] and grow every time-indexed array."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != fitted.model.n_series:
        raise ValueError(f"new rows must be [J, {fitted.model.n_series}]")
    if not np.all(np.isfinite(rows)):
        raise ValueError("new rows contain non-finite values")
    if rows.shape[0] == 0:
        return fitted
    if fitted.panel is None:
        raise ValueError("no panel attached to this fit")
    panel = np.concatenate([fitted.panel, rows], axis=0)
    grown = fitted.model.with_periods(panel.shape[0])
    grow_params(fitted.params, fitted.adam, fitted.vspec, fitted.model, grown)
    fitted.model = grown
    fitted.panel = panel
    fitted.data_fingerprint = panel_fingerprint(panel)
    return fitted


def fit(model: ModelSpec, vspec: VariationalSpec, panel: np.ndarray, iters: int,
        master_seed: int, adam_alpha: float = 0.001, adam_tau1: float = 0.9,
        adam_tau2: float = 0.99, adam_eps: float = 1e-8) -> FittedModel:
    """Fit the chosen family to a [T, S] panel from a fresh initialisation.

    Implemented as the degenerate sequential path: initialise at zero periods,
    absorb the whole panel, then optimise.  Absorbing data later via
    sequential updates therefore runs exactly this code.
    """
    panel = np.asarray(panel, dtype=np.float64)
    if panel.ndim != 2 or panel.shape[1] != model.n_series:
        raise ValueError(f"panel must be [T, {model.n_series}]")
    if panel.shape[0] < 2:
        raise ValueError("need at least two return periods")
    if not np.all(np.isfinite(panel)):
        raise ValueError("panel contains non-finite values")
    fitted = cold_start(model, vspec, master_seed, adam_alpha, adam_tau1,
                        adam_tau2, adam_eps)
    absorb_rows(fitted, panel)
    return optimize(fitted, iters)


def estimate_elbo(fitted: FittedModel, n_samples: int, seed: int | None = None) -> float:
    """Average of `n_samples` independent single-draw bound estimates.

    Draws come from a seed space disjoint from the fitting iterations, so
    estimation never perturbs a subsequent resumed fit.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if fitted.panel is None:
        raise ValueError("no panel attached to this fit")
    base = derive_seed(fitted.master_seed if seed is None else seed, STREAM_ELBO)
    y = fitted.panel.T
    total = 0.0
    for i in range(n_samples):
        draw = draw_iteration(fitted.model, fitted.vspec, fitted.params, y, base, i)
        total += elbo_sample(fitted.model, fitted.vspec, fitted.params, draw, y)
    return total / n_samples
