"""Tie-breaker distributions on [0, 1] for the oracle and the synthetic generator.

Parameters may be per-applicant arrays aligned with the market's applicant
order (sorted by id); ``idx`` selects the applicants a CDF refers to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numba import njit
from scipy import special


class Distribution:
    def cdf(self, x, idx=None) -> np.ndarray:
        raise NotImplementedError

    def ppf(self, u, idx=None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        out = self.cdf(np.asarray(x, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # 1 - U lies in (0, 1], keeping draws strictly positive
        return self.ppf(1.0 - rng.random(n))

    def to_dict(self) -> dict:
        return {"kind": type(self).__name__.lower()}


def _take(param, idx):
    param = np.asarray(param, dtype=float)
    if param.ndim == 0 or idx is None:
        return param
    return param[idx]


@dataclass(frozen=True)
class Uniform(Distribution):
    def cdf(self, x, idx=None):
        return np.clip(np.asarray(x, dtype=float), 0.0, 1.0)

    def ppf(self, u, idx=None):
        return np.asarray(u, dtype=float)


@dataclass(frozen=True)
class Power(Distribution):
    """F(x) = x**k."""

    k: float = 1.0

    def cdf(self, x, idx=None):
        return np.clip(np.asarray(x, dtype=float), 0.0, 1.0) ** _take(self.k, idx)

    def ppf(self, u, idx=None):
        return np.asarray(u, dtype=float) ** (1.0 / _take(self.k, idx))

    def to_dict(self):
        return {"kind": "power", "k": self.k}


@dataclass(frozen=True, eq=False)
class LinearTilt(Distribution):
    """Density 1 + kappa * (2x - 1) with |kappa| < 1; negative kappa favours small values."""

    kappa: float | np.ndarray = 0.0

    def cdf(self, x, idx=None):
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        k = _take(self.kappa, idx)
        return x + k * (x * x - x)

    def ppf(self, u, idx=None):
        u = np.asarray(u, dtype=float)
        k = np.asarray(_take(self.kappa, idx), dtype=float)
        if u.ndim == 1 and k.shape in ((), u.shape):
            return _tilt_ppf(u, np.broadcast_to(k, u.shape))
        return _tilt_ppf_np(u, k)

    def to_dict(self):
        k = np.asarray(self.kappa)
        return {"kind": "lineartilt", "kappa": k.tolist()}


def _tilt_ppf_np(u, k):
    b = 1.0 - k
    # root of k x^2 + (1 - k) x - u = 0 in the cancellation-free form
    return 2.0 * u / (b + np.sqrt(b * b + 4.0 * k * u))


@njit(cache=True)
def _tilt_ppf(u, k):
    out = np.empty(u.shape[0])
    for j in range(u.shape[0]):
        b = 1.0 - k[j]
        out[j] = 2.0 * u[j] / (b + np.sqrt(b * b + 4.0 * k[j] * u[j]))
    return out


@dataclass(frozen=True)
class Beta(Distribution):
    a: float = 2.0
    b: float = 2.0

    def cdf(self, x, idx=None):
        return special.betainc(_take(self.a, idx), _take(self.b, idx),
                               np.clip(np.asarray(x, dtype=float), 0.0, 1.0))

    def ppf(self, u, idx=None):
        return special.betaincinv(_take(self.a, idx), _take(self.b, idx), np.asarray(u, dtype=float))

    def to_dict(self):
        return {"kind": "beta", "a": self.a, "b": self.b}


@dataclass(frozen=True, eq=False)
class Mixture(Distribution):
    components: tuple[Distribution, ...] = ()
    weights: tuple[float, ...] = ()

    def cdf(self, x, idx=None):
        return sum(w * c.cdf(x, idx) for c, w in zip(self.components, self.weights))

    def ppf(self, u, idx=None):
        # monotone bisection; 60 halvings reach double precision on [0, 1]
        u = np.asarray(u, dtype=float)
        lo = np.zeros_like(u)
        hi = np.ones_like(u)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid, idx) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi

    def to_dict(self):
        return {"kind": "mixture", "weights": list(self.weights),
                "components": [c.to_dict() for c in self.components]}


def from_dict(d: Mapping) -> Distribution:
    kind = d.get("kind", "uniform")
    if kind == "uniform":
        return Uniform()
    if kind == "power":
        return Power(float(d["k"]))
    if kind == "lineartilt":
        k = d.get("kappa", 0.0)
        return LinearTilt(np.asarray(k, dtype=float) if isinstance(k, list) else float(k))
    if kind == "beta":
        return Beta(float(d["a"]), float(d["b"]))
    if kind == "mixture":
        return Mixture(tuple(from_dict(c) for c in d["components"]), tuple(d["weights"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


def check_cdf(F: Callable, grid_size: int = 201) -> None:
    """Raise ValueError unless F is a distribution function on [0, 1]."""
    grid = np.linspace(0.0, 1.0, grid_size)
    vals = np.array([float(F(x)) for x in grid])
    if not np.all(np.isfinite(vals)):
        raise ValueError("CDF returned non-finite values")
    if abs(vals[0]) > 1e-12 or abs(vals[-1] - 1.0) > 1e-12:
        raise ValueError("CDF must satisfy F(0) = 0 and F(1) = 1")
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError("CDF must be non-decreasing")


@dataclass
class CdfFamily:
    """Per-tie-breaker distributions; lottery tie-breakers are always uniform."""

    n_lottery: int
    n_tiebreakers: int
    screened: dict[int, Distribution] = field(default_factory=dict)

    def dist(self, v: int) -> Distribution:
        if v <= self.n_lottery:
            return Uniform()
        return self.screened.get(v, Uniform())

    def validate(self, n_applicants: int | None = None) -> None:
        for v, d in self.screened.items():
            if v <= self.n_lottery:
                raise ValueError(f"tie-breaker {v} is a lottery and must stay uniform")
            params = [np.asarray(p) for p in getattr(d, "__dict__", {}).values()
                      if isinstance(p, np.ndarray)]
            if params and n_applicants is not None and any(p.shape[0] != n_applicants for p in params):
                raise ValueError(f"tie-breaker {v}: per-applicant parameters do not match market size")
            for j in ([0] if not params else [0, params[0].shape[0] - 1]):
                idx = j if params else None
                check_cdf(lambda x: d.cdf(x, idx))

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, V) matrix of tie-breakers in (0, 1]."""
        R = 1.0 - rng.random((n, self.n_tiebreakers))
        for v, d in self.screened.items():
            R[:, v - 1] = d.ppf(R[:, v - 1])
        return R

    def tilt_matrix(self, n: int) -> np.ndarray | None:
        """(n, V) linear-tilt parameters when every tie-breaker is uniform or tilted, else None."""
        K = np.zeros((n, self.n_tiebreakers))
        for v, d in self.screened.items():
            if isinstance(d, LinearTilt):
                K[:, v - 1] = np.broadcast_to(np.asarray(d.kappa, dtype=float), (n,))
            elif not isinstance(d, Uniform):
                return None
        return K

    def type_cdf(self, v: int, idx: Sequence[int] | None = None) -> Callable[[float], float]:
        """F_v(x | theta) as the average CDF of the applicants in ``idx``."""
        d = self.dist(v)

        def F(x):
            vals = d.cdf(np.full(len(idx), x) if idx is not None else x, idx)
            return float(np.mean(vals))
        return F

    def to_dict(self) -> dict:
        return {"n_lottery": self.n_lottery, "n_tiebreakers": self.n_tiebreakers,
                "screened": {str(v): d.to_dict() for v, d in self.screened.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CdfFamily":
        return cls(int(d["n_lottery"]), int(d["n_tiebreakers"]),
                   {int(v): from_dict(x) for v, x in d.get("screened", {}).items()})
