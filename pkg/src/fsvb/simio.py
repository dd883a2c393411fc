"""Panel simulation, CSV ingestion, run configuration, and fit snapshots."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .engine import AdamState, FitDiagnostics, FittedModel, VariationalParams, updatable_fields
from .families import FAMILIES, SrnBlock, TbnBlock, VariationalSpec
from .model import LatentStates, ModelSpec
from .util import STREAM_SIM, panel_fingerprint, stream


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass
class SimParams:
    """Natural-scale generative parameters for one simulated panel."""

    kappa_eps: np.ndarray  # [S] idiosyncratic log-variance levels
    tau_eps: np.ndarray  # [S] volatility-of-volatility, >= 0
    phi_eps: np.ndarray  # [S] AR(1) persistence, |phi| < 1
    tau_f: np.ndarray  # [K]
    phi_f: np.ndarray  # [K]
    beta: np.ndarray  # [S, K] loadings
    v_eps: np.ndarray | None = None  # [S] degrees of freedom, Student-t only
    v_f: np.ndarray | None = None  # [K]


@dataclass
class SimTruth:
    """Generative parameters, latent paths, and the seed behind one panel."""

    theta: SimParams
    states: LatentStates
    seed: int


def default_sim_params(model: ModelSpec, seed: int) -> SimParams:
    """Representative generative parameters: persistent volatility, unit-scale
    lower-triangular loadings with positive diagonal, moderate tail weight."""
    rng = stream(seed, STREAM_SIM, 1, 0)
    S, K = model.n_series, model.n_factors
    beta = np.tril(rng.normal(0.0, 1.0, (S, K)))
    diag = np.arange(K)
    beta[diag, diag] = np.abs(beta[diag, diag]) + 0.5
    v_eps = rng.uniform(10.0, 30.0, S) if model.is_student_t else None
    v_f = rng.uniform(10.0, 30.0, K) if model.is_student_t else None
    return SimParams(
        kappa_eps=rng.uniform(-1.0, 0.0, S),
        tau_eps=rng.uniform(0.1, 0.4, S),
        phi_eps=rng.uniform(0.9, 0.98, S),
        tau_f=rng.uniform(0.1, 0.4, K),
        phi_f=rng.uniform(0.9, 0.98, K),
        beta=beta, v_eps=v_eps, v_f=v_f,
    )


def _as_vector(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _validate_sim_params(model: ModelSpec, theta: SimParams) -> SimParams:
    S, K = model.n_series, model.n_factors
    theta = replace(
        theta,
        kappa_eps=_as_vector(theta.kappa_eps, S, "kappa_eps"),
        tau_eps=_as_vector(theta.tau_eps, S, "tau_eps"),
        phi_eps=_as_vector(theta.phi_eps, S, "phi_eps"),
        tau_f=_as_vector(theta.tau_f, K, "tau_f"),
        phi_f=_as_vector(theta.phi_f, K, "phi_f"),
    )
    beta = np.asarray(theta.beta, dtype=np.float64)
    if beta.shape != (S, K):
        raise ValueError(f"beta must have shape ({S}, {K})")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta contains non-finite values")
    theta.beta = beta
    for name, arr in (("tau_eps", theta.tau_eps), ("tau_f", theta.tau_f)):
        if np.any(arr < 0.0):
            raise ValueError(f"{name} must be non-negative")
    for name, arr in (("phi_eps", theta.phi_eps), ("phi_f", theta.phi_f)):
        if np.any(np.abs(arr) >= 1.0):
            raise ValueError(f"{name} must satisfy |phi| < 1")
    if model.is_student_t:
        if theta.v_eps is None or theta.v_f is None:
            raise ValueError("Student-t simulation needs v_eps and v_f")
        theta.v_eps = _as_vector(theta.v_eps, S, "v_eps")
        theta.v_f = _as_vector(theta.v_f, K, "v_f")
        if np.any(theta.v_eps <= 0.0) or np.any(theta.v_f <= 0.0):
            raise ValueError("degrees of freedom must be positive")
    return theta


def _ar1_paths(phi: np.ndarray, innov: np.ndarray) -> np.ndarray:
    """Stationary AR(1) paths h_t = phi h_{t-1} + z_t, row by row."""
    out = np.empty_like(innov)
    for i, p in enumerate(phi):
        z = innov[i].copy()
        z[0] /= np.sqrt(1.0 - p * p)
        out[i] = lfilter([1.0], [1.0, -p], z)
    return out


def _inverse_gamma(rng: np.random.Generator, v: np.ndarray, t: int) -> np.ndarray:
    """Mixing weights W ~ IG(v/2, v/2) for each row of v, [len(v), t]."""
    half = np.broadcast_to(0.5 * v[:, None], (v.size, t))
    return half / rng.gamma(half)


def simulate_fsv(model: ModelSpec, theta: SimParams, T: int,
                 seed: int) -> tuple[np.ndarray, SimTruth]:
    """Simulate a [T, S] returns panel and return it with its ground truth.

    Log-volatilities start from their stationary law (variance 1/(1-phi^2)),
    factors are N(0, D_t), and Student-t errors scale the Gaussian noise by
    independent inverse-gamma mixing weights, period by period.
    """
    theta = _validate_sim_params(model, theta)
    if T < 1:
        raise ValueError("need at least one period")
    rng = stream(seed, STREAM_SIM, 0, 0)
    S, K = model.n_series, model.n_factors
    h_eps = _ar1_paths(theta.phi_eps, rng.standard_normal((S, T)))
    h_f = _ar1_paths(theta.phi_f, rng.standard_normal((K, T)))
    eta_f = rng.standard_normal((K, T))
    eta_y = rng.standard_normal((S, T))
    v = np.exp(theta.tau_eps[:, None] * h_eps + theta.kappa_eps[:, None])
    d = np.exp(theta.tau_f[:, None] * h_f)
    w_eps = w_f = None
    if model.is_student_t:
        w_eps = _inverse_gamma(rng, theta.v_eps, T)
        w_f = _inverse_gamma(rng, theta.v_f, T)
        v = v * w_eps
        d = d * w_f
    f = np.sqrt(d) * eta_f
    y = theta.beta @ f + np.sqrt(v) * eta_y
    states = LatentStates(h_eps=h_eps, h_f=h_f, f=f, w_eps=w_eps, w_f=w_f)
    return np.ascontiguousarray(y.T), SimTruth(theta=theta, states=states, seed=seed)


# ---------------------------------------------------------------------------
# Returns panels as CSV
# ---------------------------------------------------------------------------


class PanelError(ValueError):
    """A returns CSV failed to parse; the message carries the location."""


@dataclass
class Panel:
    """A [T, S] block of returns with one name per series column."""

    values: np.ndarray
    columns: list[str]


def panel_from_array(values: np.ndarray) -> Panel:
    """Wrap a raw [T, S] array with generated column names s1..sS."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise PanelError("panel values must be two-dimensional")
    names = [f"s{j + 1}" for j in range(values.shape[1])]
    return Panel(values=values, columns=names)


def save_panel(panel: Panel | np.ndarray, path) -> None:
    """Write a panel as UTF-8 CSV: one header row, then one row per period.

    Floats are printed in shortest round-trip form, so load_panel recovers
    every value bit-exactly.
    """
    if isinstance(panel, np.ndarray):
        panel = panel_from_array(panel)
    values = np.asarray(panel.values, dtype=np.float64)
    lines = [",".join(panel.columns)]
    for row in values:
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_panel(path) -> Panel:
    """Parse a returns CSV; errors name the offending line and column."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise PanelError("empty file")
    columns = [c.strip() for c in lines[0].split(",")]
    if len(lines) == 1:
        raise PanelError("no data rows")
    n = len(columns)
    values = np.empty((len(lines) - 1, n))
    for i, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != n:
            raise PanelError(f"line {i}: expected {n} columns, found {len(cells)}")
        for j, cell in enumerate(cells):
            try:
                values[i - 2, j] = float(cell)
            except ValueError as exc:
                raise PanelError(
                    f"line {i}, column {j + 1}: not a number: {cell.strip()!r}"
                ) from exc
    return Panel(values=values, columns=columns)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


class ConfigError(ValueError):
    """A run-configuration document failed validation."""


@dataclass(frozen=True)
class RunConfig:
    """Typed run settings with every default applied."""

    family: str = "q3"
    error_family: str = "normal"
    n_factors: int = 1
    iters: int = 50000
    seed: int | None = None
    adam_alpha: float = 0.001
    adam_tau1: float = 0.9
    adam_tau2: float = 0.99
    adam_eps: float = 1e-8
    seq_update_frequency: int = 5
    seq_iters: int = 2000
    forecast_h: int = 1
    forecast_m: int = 10000
    p_beta: int = 4
    p_fpath: int = 0

    def variational_spec(self) -> VariationalSpec:
        return VariationalSpec(family=self.family, p_beta=self.p_beta,
                               p_fpath=self.p_fpath)


# Documented key -> (RunConfig field, expected type).
_CONFIG_KEYS = {
    "family": ("family", str),
    "error_family": ("error_family", str),
    "K": ("n_factors", int),
    "iters": ("iters", int),
    "seed": ("seed", int),
    "adam.alpha": ("adam_alpha", float),
    "adam.tau1": ("adam_tau1", float),
    "adam.tau2": ("adam_tau2", float),
    "adam.eps": ("adam_eps", float),
    "seq.update_frequency": ("seq_update_frequency", int),
    "seq.iters": ("seq_iters", int),
    "forecast.H": ("forecast_h", int),
    "forecast.M": ("forecast_m", int),
    "srn.p_beta": ("p_beta", int),
    "srn.p_fpath": ("p_fpath", int),
}


def _read_config_text(source) -> str:
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8")
    text = str(source)
    if "\n" in text or "=" in text or not text.strip():
        return text
    return Path(text).read_text(encoding="utf-8")


def validate_config(config: RunConfig) -> None:
    """Raise ConfigError if any setting is out of its documented range."""
    if config.family not in FAMILIES:
        raise ConfigError(f"family must be one of {', '.join(FAMILIES)}; "
                          f"got {config.family!r}")
    if config.error_family not in ("normal", "student_t"):
        raise ConfigError(f"error_family must be normal or student_t; "
                          f"got {config.error_family!r}")
    positive = [("K", config.n_factors), ("seq.update_frequency", config.seq_update_frequency),
                ("forecast.H", config.forecast_h), ("forecast.M", config.forecast_m)]
    for key, value in positive:
        if value < 1:
            raise ConfigError(f"{key} must be at least 1")
    non_negative = [("iters", config.iters), ("seq.iters", config.seq_iters),
                    ("srn.p_beta", config.p_beta), ("srn.p_fpath", config.p_fpath)]
    for key, value in non_negative:
        if value < 0:
            raise ConfigError(f"{key} must be non-negative")
    if config.seed is not None and config.seed < 0:
        raise ConfigError("seed must be non-negative")
    for key, value in (("adam.alpha", config.adam_alpha), ("adam.eps", config.adam_eps)):
        if not value > 0.0:
            raise ConfigError(f"{key} must be positive")
    for key, value in (("adam.tau1", config.adam_tau1), ("adam.tau2", config.adam_tau2)):
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"{key} must lie in [0, 1)")


def parse_config(source) -> RunConfig:
    """Parse TOML run settings from a path or literal text; apply defaults.

    A string containing a newline or '=' (or only whitespace) is treated as
    the document itself; anything else is a path.  Unknown keys and wrongly
    typed values are rejected by name.
    """
    try:
        doc = tomllib.loads(_read_config_text(source))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    flat: dict[str, object] = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            for sub, inner in value.items():
                flat[f"{key}.{sub}"] = inner
        else:
            flat[key] = value
    kwargs: dict[str, object] = {}
    for key, value in flat.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        name, expected = _CONFIG_KEYS[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ConfigError(f"configuration key {key!r} must be {expected.__name__}")
        kwargs[name] = value
    config = RunConfig(**kwargs)
    validate_config(config)
    return config


def serialize_config(config: RunConfig) -> str:
    """Render a RunConfig as TOML text that parse_config reads back equal."""
    lines = [
        f'family = "{config.family}"',
        f'error_family = "{config.error_family}"',
        f"K = {config.n_factors}",
        f"iters = {config.iters}",
    ]
    if config.seed is not None:
        lines.append(f"seed = {config.seed}")
    lines += [
        "",
        "[adam]",
        f"alpha = {config.adam_alpha!r}",
        f"tau1 = {config.adam_tau1!r}",
        f"tau2 = {config.adam_tau2!r}",
        f"eps = {config.adam_eps!r}",
        "",
        "[seq]",
        f"update_frequency = {config.seq_update_frequency}",
        f"iters = {config.seq_iters}",
        "",
        "[forecast]",
        f"H = {config.forecast_h}",
        f"M = {config.forecast_m}",
        "",
        "[srn]",
        f"p_beta = {config.p_beta}",
        f"p_fpath = {config.p_fpath}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------


MAGIC = b"FSVBSNAP1\n"
SNAPSHOT_VERSION = 1

_MODEL_FIELDS = ("n_series", "n_factors", "n_periods", "error_family",
                 "a0", "b0", "kappa_var", "beta_var", "a_v", "b_v")


class SnapshotError(ValueError):
    """A snapshot file is unreadable, corrupt, or inconsistent with its inputs."""


def _block_fields(group: str, block) -> tuple[str, ...]:
    if isinstance(block, TbnBlock):
        return ("mu_g", "cstar_g", "d", "dmat", "fstar", "fmat")
    return ("gamma_u", "mu", "bmat", "dvec")


def _array_entries(fitted: FittedModel) -> list[tuple[str, np.ndarray]]:
    """Every float64 payload in one deterministic order."""
    entries = [("elbo_trace", np.asarray(fitted.elbo_trace, dtype=np.float64))]
    for (group, idx), block in fitted.params.named_blocks():
        for name in _block_fields(group, block):
            entries.append((f"params.{group}.{idx}.{name}", getattr(block, name)))
    for (group, idx), block in fitted.params.named_blocks():
        for name in updatable_fields(group, block):
            state = fitted.adam[(group, idx)][name]
            entries.append((f"adam.{group}.{idx}.{name}.m", state.m))
            entries.append((f"adam.{group}.{idx}.{name}.v", state.v))
    return entries


def save_snapshot(fitted: FittedModel, path) -> None:
    """Persist a fit bit-exactly: manifest plus raw little-endian f64 arrays.

    The attached panel is not stored, only its fingerprint; load_snapshot
    verifies a re-supplied panel against it.
    """
    entries = _array_entries(fitted)
    adam_meta = {}
    for (group, idx), block in fitted.params.named_blocks():
        for name in updatable_fields(group, block):
            state = fitted.adam[(group, idx)][name]
            adam_meta[f"{group}.{idx}.{name}"] = {
                "t": state.t, "alpha": state.alpha, "tau1": state.tau1,
                "tau2": state.tau2, "eps": state.eps,
            }
    manifest = {
        "format": "fsvb-snapshot",
        "version": SNAPSHOT_VERSION,
        "model": {name: getattr(fitted.model, name) for name in _MODEL_FIELDS},
        "vspec": {"family": fitted.vspec.family, "p_beta": fitted.vspec.p_beta,
                  "p_fpath": fitted.vspec.p_fpath},
        "master_seed": fitted.master_seed,
        "iterations_run": fitted.iterations_run,
        "data_fingerprint": fitted.data_fingerprint,
        "diagnostics": {"total_steps": fitted.diagnostics.total_steps,
                        "rejected_steps": fitted.diagnostics.rejected_steps,
                        "clamp_events": fitted.diagnostics.clamp_events},
        "adam_meta": adam_meta,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _rebuild_params(arrays: dict[str, np.ndarray]) -> VariationalParams:
    groups: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for name, arr in arrays.items():
        if not name.startswith("params."):
            continue
        _, group, idx, fieldname = name.split(".")
        groups.setdefault(group, {}).setdefault(int(idx), {})[fieldname] = arr
    params = VariationalParams()
    for group, members in groups.items():
        for idx in sorted(members):
            fields = members[idx]
            cls = TbnBlock if group in ("idio", "fvol") else SrnBlock
            block = cls(**fields)
            if group == "beta":
                params.beta = block
            elif group == "mf":
                params.mf = block
            else:
                getattr(params, group).append(block)
    return params


def _rebuild_adam(arrays: dict[str, np.ndarray], adam_meta: dict) -> dict:
    tree: dict[tuple[str, int], dict[str, dict[str, np.ndarray]]] = {}
    for name, arr in arrays.items():
        if not name.startswith("adam."):
            continue
        _, group, idx, fieldname, part = name.split(".")
        tree.setdefault((group, int(idx)), {}).setdefault(fieldname, {})[part] = arr
    adam: dict = {}
    for (group, idx), fields in tree.items():
        states = {}
        for fieldname, parts in fields.items():
            meta = adam_meta[f"{group}.{idx}.{fieldname}"]
            states[fieldname] = AdamState(
                m=parts["m"], v=parts["v"], t=int(meta["t"]), alpha=meta["alpha"],
                tau1=meta["tau1"], tau2=meta["tau2"], eps=meta["eps"],
            )
        adam[(group, idx)] = states
    return adam


def load_snapshot(path, panel: np.ndarray | None = None,
                  allow_fingerprint_mismatch: bool = False) -> FittedModel:
    """Restore a fit bit-exactly; optionally reattach its returns panel.

    A supplied panel must match the stored fingerprint unless the override
    flag is set, in which case the fingerprint is recomputed from the panel.
    """
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise SnapshotError("not a snapshot file")
    offset = len(MAGIC)
    if len(data) < offset + 8:
        raise SnapshotError("truncated snapshot: missing manifest length")
    (blob_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    if len(data) < offset + blob_len:
        raise SnapshotError("truncated snapshot: incomplete manifest")
    try:
        manifest = json.loads(data[offset : offset + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"corrupt snapshot manifest: {exc}") from exc
    offset += blob_len
    if manifest.get("format") != "fsvb-snapshot":
        raise SnapshotError("not a snapshot manifest")
    if manifest.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {manifest.get('version')!r}")
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + nbytes:
            raise SnapshotError(f"truncated snapshot: array {entry['name']!r} incomplete")
        arrays[entry["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        )
        offset += nbytes
    if offset != len(data):
        raise SnapshotError("trailing bytes after snapshot payload")
    model = ModelSpec(**manifest["model"])
    vspec = VariationalSpec(**manifest["vspec"])
    fingerprint = manifest["data_fingerprint"]
    if panel is not None:
        panel = np.asarray(panel, dtype=np.float64)
        if panel.shape != (model.n_periods, model.n_series):
            raise SnapshotError(
                f"panel shape {panel.shape} does not match the snapshot "
                f"({model.n_periods}, {model.n_series})")
        found = panel_fingerprint(panel)
        if found != fingerprint:
            if not allow_fingerprint_mismatch:
                raise SnapshotError("panel fingerprint does not match the snapshot")
            fingerprint = found
    return FittedModel(
        model=model,
        vspec=vspec,
        params=_rebuild_params(arrays),
        adam=_rebuild_adam(arrays, manifest["adam_meta"]),
        elbo_trace=arrays["elbo_trace"].tolist(),
        iterations_run=int(manifest["iterations_run"]),
        master_seed=int(manifest["master_seed"]),
        data_fingerprint=fingerprint,
        diagnostics=FitDiagnostics(**manifest["diagnostics"]),
        panel=panel,
    )
