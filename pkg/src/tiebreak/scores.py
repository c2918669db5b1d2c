"""Local DA propensity scores, their building blocks, and global scores.

The functions operating on a single (type, school) pair are the readable
reference path. ``estimate_local_score`` evaluates the same formulas for a
whole market through a compiled kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from . import _kernels
from .da import Cutoff, MatchOutcome
from .distributions import check_cdf
from .market import INELIGIBLE, ApplicantType, Market, MarketError

NEVER, ALWAYS, CONDITIONAL = "n", "a", "c"
T_LABELS = np.array([NEVER, ALWAYS, CONDITIONAL])


def classify(priority: float, r: float | None, cutoff: Cutoff, lottery: bool, delta: float = 0.0) -> str:
    """Never (n), always (a) or conditionally (c) seated at a school."""
    if priority == INELIGIBLE:
        return NEVER
    if cutoff.slack:
        return ALWAYS
    if priority > cutoff.marginal_priority:
        return NEVER
    if priority < cutoff.marginal_priority:
        return ALWAYS
    if lottery:
        return CONDITIONAL
    if r is None:
        raise MarketError("screened classification needs a tie-breaker value")
    if r > cutoff.tau + delta:
        return NEVER
    if r <= cutoff.tau - delta:
        return ALWAYS
    return CONDITIONAL


def classify_applicant(market: Market, applicant, school_id: int, cutoffs: Mapping[int, Cutoff],
                       delta: float = 0.0) -> str:
    school = market.school(school_id)
    r = applicant.tie_breakers.get(school.tie_breaker)
    if r is None and applicant.type.priority(school_id) != INELIGIBLE:
        raise MarketError(f"applicant {applicant.id} lacks tie-breaker {school.tie_breaker}")
    return classify(applicant.type.priority(school_id), r, cutoffs[school_id],
                    market.is_lottery(school_id), delta)


@dataclass(frozen=True)
class Mid:
    """Most informative disqualification for one tie-breaker.

    ``school`` is the preferred school whose cutoff sets the value when the
    marginal-priority branch applies; ``tied`` flags an argmax tie.
    """

    value: float
    school: int | None = None
    tied: bool = False


def compute_mid(atype: ApplicantType, school_id: int, v: int, cutoffs: Mapping[int, Cutoff],
                market: Market) -> Mid:
    if school_id not in atype.preferences:
        raise MarketError(f"type does not rank school {school_id}")
    if v < 1 or v > market.V:
        raise MarketError(f"unknown tie-breaker {v}")
    best: Mid | None = None
    for b in atype.preferred_to(school_id):
        if market.school(b).tie_breaker != v:
            continue
        rho = atype.priority(b)
        if rho == INELIGIBLE:
            continue
        cut = cutoffs[b]
        if cut.slack or rho < cut.marginal_priority:
            return Mid(1.0)
        if rho == cut.marginal_priority:
            if best is None or cut.tau > best.value:
                best = Mid(cut.tau, b)
            elif cut.tau == best.value:
                best = Mid(best.value, min(b, best.school), cut.tau < 1.0)
    return best if best is not None else Mid(0.0)


def mid_table(atype: ApplicantType, school_id: int, cutoffs: Mapping[int, Cutoff],
              market: Market) -> dict[int, Mid]:
    """MID for each tie-breaker used by a preferred school, in order of first appearance."""
    out: dict[int, Mid] = {}
    for b in atype.preferred_to(school_id):
        v = market.school(b).tie_breaker
        if v not in out:
            out[v] = compute_mid(atype, school_id, v, cutoffs, market)
    return out


def m_count(mids: Mapping[int, Mid], classification: Mapping[int, str], n_lottery: int) -> int:
    """Screened tie-breakers whose MID-determining school is conditionally seated."""
    return sum(1 for v, mid in mids.items()
               if v > n_lottery and mid.school is not None and classification.get(mid.school) == CONDITIONAL)


def sigma(m: int) -> float:
    if m < 0:
        raise ValueError("m must be non-negative")
    return 0.5 ** m


def lam(mids: Mapping[int, Mid | float], n_lottery: int) -> float:
    out = 1.0
    for v, mid in mids.items():
        if v <= n_lottery:
            out *= 1.0 - (mid.value if isinstance(mid, Mid) else mid)
    return out


def local_score(atype: ApplicantType, classification: Mapping[int, str], school_id: int,
                cutoffs: Mapping[int, Cutoff], market: Market) -> float:
    """Limiting assignment probability at ``school_id`` for cell (type, T)."""
    t_s = classification[school_id]
    if t_s == NEVER:
        return 0.0
    if any(classification.get(b) == ALWAYS for b in atype.preferred_to(school_id)):
        return 0.0
    mids = mid_table(atype, school_id, cutoffs, market)
    U = market.n_lottery
    sig = sigma(m_count(mids, classification, U))
    if t_s == ALWAYS:
        return sig * lam(mids, U)
    v = market.school(school_id).tie_breaker
    if v > U:
        return sig * lam(mids, U) * 0.5
    own = mids[v].value if v in mids else 0.0
    # sigma * lambda * (tau - MID) / (1 - MID) with the (1 - MID) factor cancelled
    rest = lam({w: mid for w, mid in mids.items() if w != v}, U)
    return sig * rest * max(0.0, cutoffs[school_id].tau - own)


def single_lottery_score(t_s: str, sig: float, mid1: float, tau_s: float, lottery_school: bool) -> float:
    """Closed form for markets with one lottery tie-breaker (preconditions as in local_score)."""
    if t_s == NEVER:
        return 0.0
    if t_s == ALWAYS:
        return sig * (1.0 - mid1)
    if lottery_school:
        return sig * max(0.0, tau_s - mid1)
    return sig * (1.0 - mid1) * 0.5


# -- bandwidths -------------------------------------------------------------

@dataclass
class Bandwidths:
    per_school: dict[int, float] = field(default_factory=dict)
    c: float = 1.0
    exponent: float = 1.0 / 3.0
    min_obs: int = 5
    guard: bool = True


def _marginal_rows(market: Market, outcome: MatchOutcome):
    arr = market.arrays
    s = arr.pref_school
    app = arr.pref_applicant()
    screened = ~arr.school_lottery[s] & ~outcome.cut_slack[s]
    marginal = screened & (arr.pref_prio == outcome.cut_rho[s])
    r = arr.R[app, arr.school_tb[s]]
    return s, marginal, r


def default_bandwidths(market: Market, outcome: MatchOutcome, c: float = 1.0,
                       exponent: float = 1.0 / 3.0) -> np.ndarray:
    """c * sd(R of marginal-priority applicants) * n_s**(-exponent), per school."""
    arr = market.arrays
    s, marginal, r = _marginal_rows(market, outcome)
    S = arr.n_schools
    n = np.bincount(s[marginal], minlength=S).astype(float)
    sr = np.bincount(s[marginal], weights=r[marginal], minlength=S)
    sr2 = np.bincount(s[marginal], weights=r[marginal] ** 2, minlength=S)
    delta = np.zeros(S)
    ok = n >= 2
    var = np.zeros(S)
    var[ok] = np.maximum(sr2[ok] - sr[ok] ** 2 / n[ok], 0.0) / (n[ok] - 1)
    delta[ok] = c * np.sqrt(var[ok]) * n[ok] ** (-exponent)
    return np.clip(delta, 0.0, 1.0)


def default_bandwidth(market: Market, outcome: MatchOutcome, school_id: int, c: float = 1.0,
                      exponent: float = 1.0 / 3.0) -> float:
    k = int(np.searchsorted(market.arrays.school_ids, school_id))
    return float(default_bandwidths(market, outcome, c, exponent)[k])


def bandwidth_rule(n: int, sd: float, c: float = 1.0, exponent: float = 1.0 / 3.0) -> float:
    if n < 1:
        return 0.0
    return min(1.0, max(0.0, c * sd * n ** (-exponent)))


def window_counts(market: Market, outcome: MatchOutcome, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Marginal-priority applicants in (tau - delta, tau] and (tau, tau + delta] per school."""
    S = market.arrays.n_schools
    s, marginal, r = _marginal_rows(market, outcome)
    tau = outcome.cut_tau[s]
    d = delta[s]
    left = marginal & (r > tau - d) & (r <= tau)
    right = marginal & (r > tau) & (r <= tau + d)
    return np.bincount(s[left], minlength=S), np.bincount(s[right], minlength=S)


def apply_guard(market: Market, outcome: MatchOutcome, delta: np.ndarray, min_obs: int = 5) -> np.ndarray:
    """Zero a school's bandwidth when either side of its cutoff has fewer than ``min_obs`` observations."""
    left, right = window_counts(market, outcome, delta)
    out = delta.copy()
    out[(left < min_obs) | (right < min_obs)] = 0.0
    return out


def resolve_bandwidths(market: Market, outcome: MatchOutcome,
                       bandwidths: Bandwidths | Mapping[int, float] | float | None = None,
                       ) -> tuple[np.ndarray, dict[int, str]]:
    if bandwidths is None:
        bandwidths = Bandwidths()
    elif isinstance(bandwidths, (int, float)):
        bandwidths = Bandwidths({int(s): float(bandwidths) for s in market.arrays.school_ids})
    elif not isinstance(bandwidths, Bandwidths):
        bandwidths = Bandwidths(dict(bandwidths))
    arr = market.arrays
    delta = default_bandwidths(market, outcome, bandwidths.c, bandwidths.exponent)
    source = {}
    for k, sid in enumerate(arr.school_ids):
        sid = int(sid)
        if arr.school_lottery[k] or outcome.cut_slack[k]:
            delta[k] = 0.0
            source[sid] = "none"
        elif sid in bandwidths.per_school:
            d = float(bandwidths.per_school[sid])
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"bandwidth {d} for school {sid} outside [0, 1]")
            delta[k] = d
            source[sid] = "user"
        else:
            source[sid] = "default"
    if bandwidths.guard:
        guarded = apply_guard(market, outcome, delta, bandwidths.min_obs)
        for k in np.flatnonzero(guarded != delta):
            source[int(arr.school_ids[k])] += "+guard"
        delta = guarded
    return delta, source


# -- whole-market estimate ----------------------------------------------------

@dataclass
class ScoreTable:
    """One row per (applicant, ranked school)."""

    applicant_index: np.ndarray
    applicant_ids: np.ndarray
    school_ids: np.ndarray
    rank: np.ndarray
    t: np.ndarray              # 0 = n, 1 = a, 2 = c
    psi: np.ndarray
    m: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    mid_own: np.ndarray
    deltas: dict[int, float]
    bandwidth_source: dict[int, str]
    school_tags: dict[int, frozenset[str]]
    n_applicants: int
    warnings: list[str] = field(default_factory=list)

    @property
    def t_labels(self) -> np.ndarray:
        return T_LABELS[self.t]

    def score(self, applicant_id: int, school_id: int) -> float:
        hit = np.flatnonzero((self.applicant_ids == applicant_id) & (self.school_ids == school_id))
        return float(self.psi[hit[0]]) if len(hit) else 0.0

    def totals(self) -> np.ndarray:
        return np.bincount(self.applicant_index, weights=self.psi, minlength=self.n_applicants)

    def sector(self, label: str) -> pd.DataFrame:
        return sector_score(self, label)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "applicant_id": self.applicant_ids,
            "school_id": self.school_ids,
            "rank": self.rank,
            "t": self.t_labels,
            "psi": self.psi,
            "m": self.m,
            "sigma": self.sigma,
            "lambda": self.lam,
        })


def _check_outcome(market: Market, outcome: MatchOutcome) -> None:
    arr = market.arrays
    if not (np.array_equal(arr.applicant_ids, outcome.applicant_ids)
            and np.array_equal(arr.school_ids, outcome.school_ids)):
        raise MarketError("outcome was not produced for this market")


def assumption2_warnings(outcome: MatchOutcome) -> list[str]:
    live = ~outcome.cut_slack & (outcome.cut_last >= 0) & (outcome.cut_tau < 1.0)
    vals, counts = np.unique(outcome.cut_tau[live], return_counts=True)
    out = []
    for v in vals[counts > 1]:
        ids = outcome.school_ids[live & (outcome.cut_tau == v)]
        out.append(f"schools {ids.tolist()} share tie-breaker cutoff {v!r}; MID ties broken by school id")
    return out


def estimate_local_score(market: Market, outcome: MatchOutcome,
                         bandwidths: Bandwidths | Mapping[int, float] | float | None = None) -> ScoreTable:
    """Plug one realized match into the local score formula for every ranked school."""
    _check_outcome(market, outcome)
    delta, source = resolve_bandwidths(market, outcome, bandwidths)
    return _score_with_delta(market, outcome, delta, source)


def _score_with_delta(market: Market, outcome: MatchOutcome, delta: np.ndarray,
                      source: dict[int, str]) -> ScoreTable:
    arr = market.arrays
    t, psi, m, sig, lam_, own, tie = _kernels.score_kernel(
        arr.pref_ptr, arr.pref_school, arr.pref_prio, arr.school_tb, arr.school_lottery, arr.R,
        outcome.cut_rho, outcome.cut_tau, outcome.cut_slack, delta, arr.n_lottery, arr.n_tiebreakers)
    app = arr.pref_applicant()
    warnings = assumption2_warnings(outcome)
    if tie.any():
        warnings.append(f"{int(tie.sum())} scores use a tied MID-determining school")
    return ScoreTable(
        applicant_index=app,
        applicant_ids=arr.applicant_ids[app],
        school_ids=arr.school_ids[arr.pref_school],
        rank=arr.pref_rank(),
        t=t, psi=psi, m=m, sigma=sig, lam=lam_, mid_own=own,
        deltas={int(s): float(d) for s, d in zip(arr.school_ids, delta)},
        bandwidth_source=source,
        school_tags={s.id: s.tags for s in market.schools},
        n_applicants=arr.n_applicants,
        warnings=warnings,
    )


def mids_for_row(market: Market, outcome: MatchOutcome, applicant_id: int, school_id: int) -> dict[int, float]:
    a = market.applicant_map[applicant_id]
    return {v: mid.value for v, mid in mid_table(a.type, school_id, outcome.cutoffs, market).items()}


def sector_score(table: ScoreTable, label: str) -> pd.DataFrame:
    """Sum of school scores over schools carrying ``label``; risk means the sum is in (0, 1)."""
    tagged = {s for s, tags in table.school_tags.items() if label in tags}
    if not tagged:
        raise KeyError(f"no school carries label {label!r}")
    mask = np.isin(table.school_ids, list(tagged))
    psi = np.bincount(table.applicant_index[mask], weights=table.psi[mask], minlength=table.n_applicants)
    ids = np.empty(table.n_applicants, dtype=np.int64)
    ids[table.applicant_index] = table.applicant_ids
    return pd.DataFrame({"applicant_id": ids, "psi": psi, "risk": (psi > 0.0) & (psi < 1.0)})


# -- global scores ------------------------------------------------------------

def sd_global_score(atype: ApplicantType, cutoffs: Mapping[int, Cutoff],
                    cdf: Callable[[float], float]) -> dict[int, float]:
    """Serial dictatorship assignment probability per ranked school for CDF ``cdf``."""
    check_cdf(cdf)
    out = {}
    mid = 0.0
    for s in atype.preferences:
        c = cutoffs[s]
        tau = 1.0 if c.slack else c.tau
        out[s] = max(0.0, float(cdf(tau)) - float(cdf(mid)))
        mid = max(mid, tau)
    return out


def da_global_score(atype: ApplicantType, cutoffs: Mapping[int, Cutoff], market: Market,
                    cdfs: Mapping[int, Callable[[float], float]] | None = None) -> dict[int, float]:
    """DA assignment probability given type, for independent tie-breakers with CDFs F_v."""
    cdfs = dict(cdfs or {})
    U = market.n_lottery
    for v, F in cdfs.items():
        if v > U:
            check_cdf(F)

    def F(v, x):
        if v <= U or v not in cdfs:
            return x
        return float(cdfs[v](x))

    out = {}
    for s in atype.preferences:
        c = cutoffs[s]
        rho = atype.priority(s)
        rho_s = c.marginal_priority
        if rho == INELIGIBLE or (not c.slack and rho > rho_s):
            out[s] = 0.0
            continue
        mids = mid_table(atype, s, cutoffs, market)
        v_s = market.school(s).tie_breaker
        if c.slack or rho < rho_s:
            p = 1.0
            for v, mid in mids.items():
                p *= 1.0 - F(v, mid.value)
            out[s] = p
            continue
        p = 1.0
        for v, mid in mids.items():
            if v != v_s:
                p *= 1.0 - F(v, mid.value)
        own = mids[v_s].value if v_s in mids else 0.0
        out[s] = p * max(0.0, F(v_s, c.tau) - F(v_s, own))
    return out


def is_close(a: float, b: float, tol: float = 1e-12) -> bool:
    return math.isclose(a, b, rel_tol=0.0, abs_tol=tol)
