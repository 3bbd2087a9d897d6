"""Shared numerical primitives: ensembles, stable log-weight arithmetic, RNG streams, error metrics.

Conventions used throughout the package:

* An *ensemble* is a ``(B, d)`` float64 array — row ``i`` is particle ``i``,
  column ``k`` is state coordinate ``k``.
* All importance weights live in log-space (nats) end to end.  Raw
  exponentials are never materialized before a max-shift: the data-attraction
  exponent grows like ``|Z|^2 / 2T`` and overflows double precision for
  ``|Z|`` around 40.
* Randomness flows through :class:`RngStream` values — counter-based Philox
  streams addressed by ``(seed, stream path)`` — so any draw is reproducible
  on every platform regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateWeightsError",
    "RngStream",
    "validate_ensemble",
    "log_sum_exp",
    "normalize_log_weights",
    "rmse",
    "smoothed_rmse",
]


class DegenerateWeightsError(ValueError):
    """Raised when a log-weight vector carries no usable mass (all entries -inf)."""


@dataclass(frozen=True)
class RngStream:
    """A splittable, platform-stable random stream.

    The same ``(seed, path)`` pair always reproduces the identical sequence;
    distinct paths give statistically independent streams (NumPy
    ``SeedSequence`` spawn-key semantics on a counter-based Philox generator).

    A stream is an *address*, not a stateful generator: call
    :meth:`generator` once per drawing site, and derive sub-streams with
    :meth:`child` instead of drawing twice from the same address.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *ids: int) -> "RngStream":
        """Derive the independent sub-stream addressed by ``path + ids``."""
        return RngStream(self.seed, self.path + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        """Instantiate the Generator for this address (same address, same sequence)."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def validate_ensemble(states: np.ndarray, name: str = "ensemble") -> np.ndarray:
    """Coerce ``states`` to a finite, C-contiguous ``(B, d)`` float64 array.

    Accepts a 1-D vector as a single-coordinate ensemble of shape ``(B, 1)``.
    """
    arr = np.ascontiguousarray(states, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a (B, d) matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have B >= 1 and d >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def log_sum_exp(values) -> float:
    """Return ``log(sum(exp(values)))`` via the max-shift; never overflows for finite input.

    Parameters
    ----------
    values : array_like
        Log-weights in nats.  Must be nonempty.

    Raises
    ------
    ValueError
        If ``values`` is empty ("empty weight vector").
    """
    lw = np.asarray(values, dtype=np.float64).ravel()
    if lw.size == 0:
        raise ValueError("empty weight vector")
    m = np.max(lw)
    if not np.isfinite(m):
        # all -inf (no finite entry) -> log(0); +inf input is the caller's bug
        return float(m)
    return float(m + np.log(np.sum(np.exp(lw - m))))


def normalize_log_weights(lw) -> np.ndarray:
    """Softmax of a log-weight vector: ``p_i = exp(lw_i - log_sum_exp(lw))``.

    The max is subtracted before exponentiation, so adding one constant to
    every entry cancels exactly — this is the implementation-level form of
    the normalizing-constant cancellation the bridge drift relies on.

    Raises
    ------
    DegenerateWeightsError
        If every entry is ``-inf`` ("degenerate weights").
    ValueError
        If ``lw`` is empty ("empty weight vector").
    """
    lw = np.asarray(lw, dtype=np.float64).ravel()
    if lw.size == 0:
        raise ValueError("empty weight vector")
    m = np.max(lw)
    if m == -np.inf:
        raise DegenerateWeightsError("degenerate weights")
    w = np.exp(lw - m)
    return w / np.sum(w)


def rmse(estimate, truth) -> float:
    """Per-step root-mean-square error over state coordinates."""
    e = np.asarray(estimate, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if e.shape != t.shape:
        raise ValueError(f"length mismatch: estimate has {e.size} entries, truth has {t.size}")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def smoothed_rmse(series, window: int = 20) -> np.ndarray:
    """Trailing moving average: element ``j`` is the mean of ``series[max(0, j-window+1)..j]``.

    Presentation smoother for error-curve reporting; ``window`` is a config
    parameter (default 20 steps).
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    s = np.asarray(series, dtype=np.float64).ravel()
    if s.size == 0:
        return s.copy()
    out = np.empty_like(s)
    # direct windowed means: O(n * window) is fine at experiment scale and
    # avoids cumulative-sum cancellation drift in long runs
    for j in range(s.size):
        lo = max(0, j - window + 1)
        out[j] = np.mean(s[lo : j + 1])
    return out
