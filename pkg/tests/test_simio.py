"""Tests for simulation, CSV panels, run configuration, and snapshots."""

import numpy as np
import pytest
import scipy.stats as st

from fsvb import engine, simio
from fsvb.families import VariationalSpec
from fsvb.model import ModelSpec
from fsvb.simio import (
    ConfigError,
    Panel,
    PanelError,
    RunConfig,
    SimParams,
    SnapshotError,
    default_sim_params,
    load_panel,
    load_snapshot,
    panel_from_array,
    parse_config,
    save_panel,
    save_snapshot,
    serialize_config,
    simulate_fsv,
)

from helpers import assert_fits_equal


def flat_params(S, K, phi=0.0, tau=0.0, kappa=0.0, beta_scale=0.0, v=None):
    beta = beta_scale * np.tril(np.ones((S, K)))
    return SimParams(
        kappa_eps=np.full(S, kappa), tau_eps=np.full(S, tau),
        phi_eps=np.full(S, phi), tau_f=np.full(K, tau), phi_f=np.full(K, phi),
        beta=beta,
        v_eps=None if v is None else np.full(S, v),
        v_f=None if v is None else np.full(K, v),
    )


class TestSimulateFsv:
    def test_same_seed_reproduces_panel(self):
        model = ModelSpec(n_series=4, n_factors=2, n_periods=0)
        theta = default_sim_params(model, seed=3)
        panel_a, truth_a = simulate_fsv(model, theta, T=50, seed=9)
        panel_b, truth_b = simulate_fsv(model, theta, T=50, seed=9)
        panel_c, _ = simulate_fsv(model, theta, T=50, seed=10)
        assert np.array_equal(panel_a, panel_b)
        assert np.array_equal(truth_a.states.h_eps, truth_b.states.h_eps)
        assert not np.array_equal(panel_a, panel_c)

    def test_shapes_and_truth_contents(self):
        model = ModelSpec(n_series=3, n_factors=2, n_periods=0, error_family="student_t")
        theta = default_sim_params(model, seed=1)
        panel, truth = simulate_fsv(model, theta, T=20, seed=2)
        assert panel.shape == (20, 3)
        assert truth.states.h_eps.shape == (3, 20)
        assert truth.states.h_f.shape == (2, 20)
        assert truth.states.f.shape == (2, 20)
        assert truth.states.w_eps.shape == (3, 20)
        assert np.all(truth.states.w_eps > 0.0)
        assert truth.seed == 2

    def test_normal_family_has_no_mixing_weights(self):
        model = ModelSpec(n_series=2, n_factors=1, n_periods=0)
        _, truth = simulate_fsv(model, flat_params(2, 1), T=5, seed=4)
        assert truth.states.w_eps is None
        assert truth.states.w_f is None

    def test_rejects_explosive_persistence(self):
        model = ModelSpec(n_series=2, n_factors=1, n_periods=0)
        theta = flat_params(2, 1, phi=1.0)
        with pytest.raises(ValueError, match="phi"):
            simulate_fsv(model, theta, T=5, seed=1)
        theta = flat_params(2, 1, phi=-1.5)
        with pytest.raises(ValueError, match="phi"):
            simulate_fsv(model, theta, T=5, seed=1)

    def test_rejects_bad_shapes_and_missing_dof(self):
        model = ModelSpec(n_series=2, n_factors=1, n_periods=0)
        theta = flat_params(3, 1)
        with pytest.raises(ValueError, match="kappa_eps"):
            simulate_fsv(model, theta, T=5, seed=1)
        model_t = ModelSpec(n_series=2, n_factors=1, n_periods=0,
                            error_family="student_t")
        with pytest.raises(ValueError, match="v_eps"):
            simulate_fsv(model_t, flat_params(2, 1), T=5, seed=1)

    def test_stationary_variance_constant_volatility(self):
        model = ModelSpec(n_series=1, n_factors=1, n_periods=0)
        theta = flat_params(1, 1, phi=0.0)
        _, truth = simulate_fsv(model, theta, T=100_000, seed=6)
        assert abs(truth.states.h_eps.var() - 1.0) < 0.02

    def test_stationary_variance_persistent_volatility(self):
        model = ModelSpec(n_series=1, n_factors=1, n_periods=0)
        theta = flat_params(1, 1, phi=0.95)
        _, truth = simulate_fsv(model, theta, T=100_000, seed=7)
        h = truth.states.h_eps[0]
        target = 1.0 / (1.0 - 0.95**2)
        assert abs(h.var() / target - 1.0) < 0.05
        lag1 = np.corrcoef(h[:-1], h[1:])[0, 1]
        assert abs(lag1 - 0.95) < 0.02

    def test_unit_normal_returns_when_model_degenerates(self):
        model = ModelSpec(n_series=5, n_factors=1, n_periods=0)
        theta = flat_params(5, 1)  # beta = 0, kappa = 0, tau = 0
        panel, _ = simulate_fsv(model, theta, T=2000, seed=8)
        assert panel.size == 10_000
        result = st.kstest(panel.ravel(), st.norm.cdf)
        assert result.pvalue > 0.01

    def test_student_t_returns_match_t_distribution(self):
        model = ModelSpec(n_series=5, n_factors=1, n_periods=0,
                          error_family="student_t")
        theta = flat_params(5, 1, v=6.0)
        panel, _ = simulate_fsv(model, theta, T=2000, seed=12)
        result = st.kstest(panel.ravel(), st.t(df=6.0).cdf)
        assert result.pvalue > 0.01
        assert abs(panel.var() / 1.5 - 1.0) < 0.1  # Var t_6 = 6/4

    def test_default_params_match_documented_ranges(self):
        model = ModelSpec(n_series=6, n_factors=2, n_periods=0,
                          error_family="student_t")
        theta = default_sim_params(model, seed=5)
        assert np.all((theta.phi_eps >= 0.9) & (theta.phi_eps <= 0.98))
        assert np.all((theta.tau_f >= 0.1) & (theta.tau_f <= 0.4))
        assert np.all((theta.kappa_eps >= -1.0) & (theta.kappa_eps <= 0.0))
        assert np.array_equal(theta.beta, np.tril(theta.beta))
        assert np.all(np.diag(theta.beta) > 0.0)
        assert np.all(theta.v_eps > 0.0)
        model_n = ModelSpec(n_series=6, n_factors=2, n_periods=0)
        assert default_sim_params(model_n, seed=5).v_eps is None


class TestPanelCsv:
    def test_two_by_two_round_trip(self, tmp_path):
        path = tmp_path / "panel.csv"
        panel = Panel(values=np.array([[0.1, -2.5], [3.125, 1e-17]]),
                      columns=["a", "b"])
        save_panel(panel, path)
        back = load_panel(path)
        assert back.columns == ["a", "b"]
        assert np.array_equal(back.values, panel.values)

    def test_random_values_round_trip_exactly(self, rng, tmp_path):
        path = tmp_path / "panel.csv"
        values = rng.normal(0.0, 1.0, (100, 10)) * 10.0 ** rng.integers(-200, 200, (100, 10))
        save_panel(values, path)
        back = load_panel(path)
        assert np.array_equal(back.values, values)
        assert back.columns == [f"s{j + 1}" for j in range(10)]

    def test_header_only_file(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("a,b\n", encoding="utf-8")
        with pytest.raises(PanelError, match="no data rows"):
            load_panel(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("", encoding="utf-8")
        with pytest.raises(PanelError, match="empty"):
            load_panel(path)

    def test_ragged_row_names_line(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("a,b\n1.0,2.0\n3.0\n", encoding="utf-8")
        with pytest.raises(PanelError, match="line 3"):
            load_panel(path)

    def test_non_numeric_cell_names_line_and_column(self, tmp_path):
        path = tmp_path / "panel.csv"
        path.write_text("a,b\n1.0,oops\n", encoding="utf-8")
        with pytest.raises(PanelError, match="line 2, column 2"):
            load_panel(path)

    def test_rejects_non_2d_array(self):
        with pytest.raises(PanelError, match="two-dimensional"):
            panel_from_array(np.zeros(3))


class TestRunConfig:
    def test_empty_text_gives_defaults(self):
        config = parse_config("")
        assert config == RunConfig()
        assert config.iters == 50000
        assert config.adam_alpha == 0.001
        assert config.p_beta == 4
        assert config.p_fpath == 0
        assert config.family == "q3"
        assert config.seq_update_frequency == 5
        assert config.forecast_m == 10000

    def test_full_document_parses_every_key(self):
        text = """
        family = "q1"
        error_family = "student_t"
        K = 3
        iters = 123
        seed = 42

        [adam]
        alpha = 0.01
        tau1 = 0.8
        tau2 = 0.95
        eps = 1e-9

        [seq]
        update_frequency = 7
        iters = 321

        [forecast]
        H = 2
        M = 500

        [srn]
        p_beta = 6
        p_fpath = 1
        """
        config = parse_config(text)
        assert config == RunConfig(
            family="q1", error_family="student_t", n_factors=3, iters=123,
            seed=42, adam_alpha=0.01, adam_tau1=0.8, adam_tau2=0.95,
            adam_eps=1e-9, seq_update_frequency=7, seq_iters=321,
            forecast_h=2, forecast_m=500, p_beta=6, p_fpath=1,
        )
        vspec = config.variational_spec()
        assert vspec == VariationalSpec(family="q1", p_beta=6, p_fpath=1)

    def test_reads_from_path(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('family = "q2"\n', encoding="utf-8")
        assert parse_config(path).family == "q2"
        assert parse_config(str(path)).family == "q2"

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError, match="q5"):
            parse_config('family = "q5"')

    def test_unknown_keys_rejected_by_name(self):
        with pytest.raises(ConfigError, match="banana"):
            parse_config("banana = 1")
        with pytest.raises(ConfigError, match="adam.gamma"):
            parse_config("[adam]\ngamma = 0.5")

    def test_type_mismatch_rejected_by_name(self):
        with pytest.raises(ConfigError, match="iters"):
            parse_config('iters = "many"')
        with pytest.raises(ConfigError, match="adam.alpha"):
            parse_config('[adam]\nalpha = "fast"')
        with pytest.raises(ConfigError, match="iters"):
            parse_config("iters = true")

    def test_value_range_checks(self):
        with pytest.raises(ConfigError, match="K"):
            parse_config("K = 0")
        with pytest.raises(ConfigError, match="seed"):
            parse_config("seed = -1")
        with pytest.raises(ConfigError, match="adam.alpha"):
            parse_config("[adam]\nalpha = 0.0")
        with pytest.raises(ConfigError, match="tau1"):
            parse_config("[adam]\ntau1 = 1.0")
        with pytest.raises(ConfigError, match="update_frequency"):
            parse_config("[seq]\nupdate_frequency = 0")

    def test_invalid_toml_reported(self):
        with pytest.raises(ConfigError, match="TOML"):
            parse_config("family = ")

    def test_serialize_round_trip(self):
        config = RunConfig(family="q2", error_family="student_t", n_factors=2,
                           iters=777, seed=5, adam_alpha=0.0025, adam_eps=1e-9,
                           seq_update_frequency=3, seq_iters=100, forecast_h=4,
                           forecast_m=250, p_beta=2, p_fpath=1)
        assert parse_config(serialize_config(config)) == config
        assert parse_config(serialize_config(RunConfig())) == RunConfig()


def small_fit(family="q3", error_family="normal", S=3, K=1, T=6, iters=12, seed=21):
    model = ModelSpec(n_series=S, n_factors=K, n_periods=0, error_family=error_family)
    vspec = VariationalSpec(family=family)
    panel = np.random.default_rng(seed).normal(0.0, 1.0, (T, S))
    return engine.fit(model, vspec, panel, iters=iters, master_seed=seed), panel


class TestSnapshot:
    def test_round_trip_is_bit_exact(self, tmp_path):
        for family in ("q1", "q2", "q3", "mf"):
            for error_family in ("normal", "student_t"):
                fitted, panel = small_fit(family, error_family)
                path = tmp_path / f"{family}-{error_family}.snap"
                save_snapshot(fitted, path)
                loaded = load_snapshot(path, panel=panel)
                assert_fits_equal(fitted, loaded)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        fitted, _ = small_fit("q2", "student_t")
        first = tmp_path / "a.snap"
        second = tmp_path / "b.snap"
        save_snapshot(fitted, first)
        save_snapshot(load_snapshot(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_randomized_fits_round_trip(self, rng, tmp_path):
        families = ("mf", "q1", "q2", "q3")
        for i in range(10):
            family = families[i % 4]
            error_family = ("normal", "student_t")[i % 2]
            S = int(rng.integers(2, 5))
            K = int(rng.integers(1, min(S, 3)))
            T = int(rng.integers(3, 9))
            fitted, panel = small_fit(family, error_family, S=S, K=K, T=T,
                                      iters=int(rng.integers(0, 20)), seed=100 + i)
            path = tmp_path / f"case{i}.snap"
            save_snapshot(fitted, path)
            assert_fits_equal(fitted, load_snapshot(path, panel=panel))

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        for family, error_family in (("q3", "normal"), ("q2", "student_t"),
                                     ("mf", "normal")):
            straight, panel = small_fit(family, error_family, iters=60)
            half, _ = small_fit(family, error_family, iters=30)
            path = tmp_path / "resume.snap"
            save_snapshot(half, path)
            resumed = load_snapshot(path, panel=panel)
            engine.optimize(resumed, 30)
            assert_fits_equal(straight, resumed)

    def test_panel_not_stored(self, tmp_path):
        fitted, _ = small_fit()
        path = tmp_path / "f.snap"
        save_snapshot(fitted, path)
        assert load_snapshot(path).panel is None

    def test_fingerprint_conflict_refused_unless_overridden(self, tmp_path):
        fitted, panel = small_fit()
        path = tmp_path / "f.snap"
        save_snapshot(fitted, path)
        other = panel + 1.0
        with pytest.raises(SnapshotError, match="fingerprint"):
            load_snapshot(path, panel=other)
        loaded = load_snapshot(path, panel=other, allow_fingerprint_mismatch=True)
        assert np.array_equal(loaded.panel, other)
        assert loaded.data_fingerprint != fitted.data_fingerprint

    def test_wrong_panel_shape_refused(self, tmp_path):
        fitted, panel = small_fit()
        path = tmp_path / "f.snap"
        save_snapshot(fitted, path)
        with pytest.raises(SnapshotError, match="shape"):
            load_snapshot(path, panel=panel[:, :2])

    def test_corruption_is_reported_not_crashed(self, tmp_path):
        fitted, _ = small_fit()
        path = tmp_path / "f.snap"
        save_snapshot(fitted, path)
        data = path.read_bytes()
        for cut in (3, len(simio.MAGIC) + 2, len(simio.MAGIC) + 8 + 10, len(data) - 5):
            clipped = tmp_path / "clipped.snap"
            clipped.write_bytes(data[:cut])
            with pytest.raises(SnapshotError):
                load_snapshot(clipped)
        padded = tmp_path / "padded.snap"
        padded.write_bytes(data + b"x")
        with pytest.raises(SnapshotError, match="trailing"):
            load_snapshot(padded)
        garbled = tmp_path / "garbled.snap"
        garbled.write_bytes(b"NOTASNAP\n" + data)
        with pytest.raises(SnapshotError, match="not a snapshot"):
            load_snapshot(garbled)

    def test_version_mismatch_detected(self, tmp_path, monkeypatch):
        fitted, _ = small_fit()
        path = tmp_path / "f.snap"
        save_snapshot(fitted, path)
        monkeypatch.setattr(simio, "SNAPSHOT_VERSION", 2)
        with pytest.raises(SnapshotError, match="version"):
            load_snapshot(path)
