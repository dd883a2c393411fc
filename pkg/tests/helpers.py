"""Random model instances and exact-equality checks for tests."""

from __future__ import annotations

import dataclasses

import numpy as np

from fsvb.model import LatentStates, ModelSpec, ThetaReal, beta_matrix


def random_theta(spec: ModelSpec, rng: np.random.Generator) -> ThetaReal:
    """A random real-scale parameter point in a numerically comfortable range."""
    S, K = spec.n_series, spec.n_factors
    theta = ThetaReal(
        kappa_eps=rng.normal(0.0, 0.5, S),
        alpha_eps=rng.normal(0.0, 0.5, S),
        psi_eps=rng.normal(1.5, 0.5, S),
        alpha_f=rng.normal(0.0, 0.5, K),
        psi_f=rng.normal(1.5, 0.5, K),
        beta_free=rng.normal(0.0, 0.4, spec.n_beta_free),
    )
    if spec.is_student_t:
        theta.vstar_eps = rng.normal(np.log(15.0), 0.2, S)
        theta.vstar_f = rng.normal(np.log(15.0), 0.2, K)
    return theta


def random_states(spec: ModelSpec, rng: np.random.Generator) -> LatentStates:
    S, K, T = spec.n_series, spec.n_factors, spec.n_periods
    x = LatentStates(
        h_eps=rng.normal(0.0, 1.0, (S, T)),
        h_f=rng.normal(0.0, 1.0, (K, T)),
        f=rng.normal(0.0, 1.0, (K, T)),
    )
    if spec.is_student_t:
        x.w_eps = 1.0 / rng.gamma(3.0, 1.0 / 3.0, (S, T))
        x.w_f = 1.0 / rng.gamma(3.0, 1.0 / 3.0, (K, T))
    return x


def random_panel(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Observations loosely consistent with the model's scale, shaped [S, T]."""
    theta = random_theta(spec, rng)
    x = random_states(spec, rng)
    beta = beta_matrix(theta.beta_free, spec)
    return beta @ x.f + rng.normal(0.0, 1.0, (spec.n_series, spec.n_periods))


def assert_params_equal(a, b) -> None:
    """Bitwise equality of two VariationalParams trees."""
    keys_a = [k for k, _ in a.named_blocks()]
    keys_b = [k for k, _ in b.named_blocks()]
    assert keys_a == keys_b
    for (key, blk_a), (_, blk_b) in zip(a.named_blocks(), b.named_blocks()):
        for field in dataclasses.fields(blk_a):
            left = getattr(blk_a, field.name)
            right = getattr(blk_b, field.name)
            assert np.array_equal(left, right), (key, field.name)


def assert_adam_equal(a: dict, b: dict) -> None:
    """Bitwise equality of two ADAM state trees."""
    assert sorted(a) == sorted(b)
    for key in a:
        assert sorted(a[key]) == sorted(b[key]), key
        for name, state_a in a[key].items():
            state_b = b[key][name]
            assert state_a.t == state_b.t, (key, name)
            for scalar in ("alpha", "tau1", "tau2", "eps"):
                assert getattr(state_a, scalar) == getattr(state_b, scalar)
            assert np.array_equal(state_a.m, state_b.m), (key, name)
            assert np.array_equal(state_a.v, state_b.v), (key, name)


def assert_fits_equal(a, b, compare_panel: bool = True) -> None:
    """Bitwise equality of two FittedModel objects (panel optional)."""
    assert a.model == b.model
    assert a.vspec == b.vspec
    assert a.iterations_run == b.iterations_run
    assert a.master_seed == b.master_seed
    assert a.data_fingerprint == b.data_fingerprint
    assert a.diagnostics == b.diagnostics
    np.testing.assert_array_equal(a.elbo_trace, b.elbo_trace)
    assert_params_equal(a.params, b.params)
    assert_adam_equal(a.adam, b.adam)
    if compare_panel:
        assert (a.panel is None) == (b.panel is None)
        if a.panel is not None:
            assert np.array_equal(a.panel, b.panel)
