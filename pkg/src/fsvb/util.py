"""Shared numerical helpers: clamped exponentials and deterministic rng streams."""

from __future__ import annotations

import contextlib

import numpy as np

# Arguments to exp() are clamped to this magnitude before exponentiation so a
# wild optimisation step degrades into a flagged, finite evaluation instead of
# an overflow.
EXP_CLAMP = 700.0

_active_monitors: list["ClampMonitor"] = []


class ClampMonitor:
    """Counts clamped exponential evaluations while installed."""

    def __init__(self) -> None:
        self.events = 0


@contextlib.contextmanager
def clamp_monitor():
    """Context manager yielding a ClampMonitor that records clamp events."""
    mon = ClampMonitor()
    _active_monitors.append(mon)
    try:
        yield mon
    finally:
        _active_monitors.remove(mon)


def safe_exp(x: np.ndarray | float) -> np.ndarray:
    """exp(x) with arguments clamped to [-EXP_CLAMP, EXP_CLAMP].

    Clamped evaluations are reported to any installed ClampMonitor.
    """
    x = np.asarray(x, dtype=np.float64)
    clipped = np.clip(x, -EXP_CLAMP, EXP_CLAMP)
    if _active_monitors:
        n = int(np.count_nonzero(clipped != x))
        if n:
            for mon in _active_monitors:
                mon.events += n
    return np.exp(clipped)


def softplus(x: np.ndarray | float) -> np.ndarray:
    """log(1 + exp(x)), numerically stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x: np.ndarray | float) -> np.ndarray:
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Deterministic rng streams.
#
# Every consumer of randomness draws from its own counter-based stream keyed
# by (master seed, stream kind, index, iteration).  Streams are stateless:
# re-creating the same key reproduces the same draws, which is what makes
# snapshot-resume and thread-count independence bit-exact.
# ---------------------------------------------------------------------------

# Stream kinds (stable integers; changing them breaks reproducibility).
STREAM_INIT = 0
STREAM_IDIO = 1
STREAM_FVOL = 2
STREAM_BETA = 3
STREAM_FPATH = 4
STREAM_JOINT = 5
STREAM_MF = 6
STREAM_DOF_EPS = 7
STREAM_DOF_F = 8
STREAM_FACTOR_DRAW = 9
STREAM_MIXING_DRAW = 10
STREAM_PILOT_DRAW = 11
STREAM_ELBO = 12
STREAM_FORECAST = 13
STREAM_SIM = 14
STREAM_SUMMARY = 15

_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    """splitmix64 finaliser; full-avalanche 64-bit mix."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream(master_seed: int, kind: int, index: int, iteration: int) -> np.random.Generator:
    """Counter-based rng stream for one (kind, index, iteration) cell."""
    a = _mix(master_seed & _MASK)
    a = _mix(a ^ _mix(kind & _MASK))
    b = _mix(a ^ _mix(index & _MASK))
    c = _mix(b ^ _mix(iteration & _MASK))
    key = (b << 64) | c
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(master_seed: int, tag: int) -> int:
    """A child master seed whose streams are disjoint from the parent's."""
    return _mix(_mix(master_seed & _MASK) ^ _mix(tag & _MASK))


def panel_fingerprint(panel: np.ndarray) -> str:
    """Content hash of a [T, S] returns panel (shape plus raw little-endian bytes)."""
    import hashlib

    arr = np.ascontiguousarray(np.asarray(panel, dtype="<f8"))
    digest = hashlib.sha256()
    digest.update(b"fsvb-panel-v1")
    digest.update(np.asarray(arr.shape, dtype="<i8").tobytes())
    digest.update(arr.tobytes())
    return digest.hexdigest()
