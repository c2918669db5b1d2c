"""Deferred acceptance, serial dictatorship and cutoff extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .market import INELIGIBLE, INF_PRIORITY, Market, MarketArrays, MarketError, validate_market


@dataclass(frozen=True)
class Cutoff:
    """DA cutoff xi = marginal_priority + tau.

    Slack schools carry xi = K + 1 and the slack flag; downstream logic reads
    the flag, never tau. ``last_admitted`` is the applicant holding the worst
    admitted position and resolves exact tie-breaker ties.
    """

    xi: float
    marginal_priority: int
    tau: float
    slack: bool
    last_admitted: int | None = None

    def admits(self, priority: float, r: float, applicant_id: int) -> bool:
        if priority == INELIGIBLE:
            return False
        if self.slack:
            return True
        if self.last_admitted is None:
            return False
        key = (priority, r, applicant_id)
        return key <= (self.marginal_priority, self.tau, self.last_admitted)


@dataclass
class MatchOutcome:
    applicant_ids: np.ndarray
    school_ids: np.ndarray
    assigned: np.ndarray          # school index per applicant, -1 unassigned
    assigned_entry: np.ndarray    # ranked-entry index into MarketArrays.pref_school
    cut_rho: np.ndarray
    cut_tau: np.ndarray
    cut_slack: np.ndarray
    cut_last: np.ndarray          # applicant index of the worst admitted, -1 if none
    max_priority: int
    mechanism: str = "da"
    tau_slack: float = 0.0

    @cached_property
    def cutoffs(self) -> dict[int, Cutoff]:
        K = self.max_priority
        out = {}
        for k, sid in enumerate(self.school_ids):
            if self.cut_slack[k]:
                rho = K + 1 if self.tau_slack == 0.0 else K
                out[int(sid)] = Cutoff(float(K + 1), rho, self.tau_slack, True)
            else:
                last = int(self.cut_last[k])
                rho = int(self.cut_rho[k])
                tau = float(self.cut_tau[k])
                out[int(sid)] = Cutoff(rho + tau, rho, tau, False,
                                       int(self.applicant_ids[last]) if last >= 0 else None)
        return out

    @cached_property
    def assignment(self) -> dict[int, int | None]:
        return {int(a): (int(self.school_ids[s]) if s >= 0 else None)
                for a, s in zip(self.applicant_ids, self.assigned)}

    def assigned_to(self, school_id: int) -> list[int]:
        k = int(np.searchsorted(self.school_ids, school_id))
        return [int(a) for a in self.applicant_ids[self.assigned == k]]

    def same_assignment(self, other: "MatchOutcome") -> bool:
        return (np.array_equal(self.applicant_ids, other.applicant_ids)
                and np.array_equal(self.school_ids, other.school_ids)
                and np.array_equal(self.assigned, other.assigned))


def _outcome_from_kernel(arr: MarketArrays, res) -> MatchOutcome:
    assigned, assigned_k, filled, worst_p, worst_r, worst_i, _ = res
    slack = ~filled
    rho = worst_p.copy()
    tau = worst_r.copy()
    last = worst_i.copy()
    zero = arr.seats <= 0
    # zero-seat schools admit nobody: marginal priority 0 puts every applicant above it
    slack[zero] = False
    rho[zero] = 0
    tau[zero] = 0.0
    last[zero] = -1
    return MatchOutcome(arr.applicant_ids, arr.school_ids, assigned, assigned_k,
                        rho, tau, slack, last, arr.max_priority)


def run_da_arrays(arr: MarketArrays) -> MatchOutcome:
    res = _kernels.da_kernel(arr.pref_ptr, arr.pref_school, arr.pref_prio,
                             arr.school_tb, arr.seats, arr.R)
    return _outcome_from_kernel(arr, res)


def run_da(market: Market, validate: bool = True) -> MatchOutcome:
    """Applicant-proposing DA; schools rank by priority then tie-breaker."""
    if validate:
        report = validate_market(market)
        if not report.ok:
            raise MarketError(f"invalid market: {report.kinds()}")
    return run_da_arrays(market.arrays)


def run_da_reference(market: Market) -> dict[int, int | None]:
    """Round-by-round DA written directly from the textbook description.

    Slow; used to cross-check the compiled engine.
    """
    seats = {s.id: market.seats(s.id) for s in market.schools}
    tb = {s.id: s.tie_breaker for s in market.schools}

    def key(a, s):
        return (a.type.priority(s), a.tie_breakers[tb[s]], a.id)

    nxt = {a.id: 0 for a in market.applicants}
    held: dict[int, list] = {s: [] for s in seats}
    proposers = list(market.applicants)
    while proposers:
        new: dict[int, list] = {s: [] for s in seats}
        for a in proposers:
            prefs = a.type.preferences
            while nxt[a.id] < len(prefs):
                s = prefs[nxt[a.id]]
                nxt[a.id] += 1
                if a.type.priority(s) != INELIGIBLE and seats[s] > 0:
                    new[s].append(a)
                    break
        proposers = []
        for s, apps in new.items():
            if not apps:
                continue
            pool = sorted(held[s] + apps, key=lambda a: key(a, s))
            held[s] = pool[:seats[s]]
            proposers.extend(pool[seats[s]:])
    out: dict[int, int | None] = {a.id: None for a in market.applicants}
    for s, apps in held.items():
        for a in apps:
            out[a.id] = s
    return out


def run_serial_dictatorship(market: Market) -> MatchOutcome:
    """Order applicants by tie-breaker; each takes the best school with seats left.

    Requires one tie-breaker for all schools and a common finite priority.
    Schools that never turn anyone away get tau = 1.
    """
    tbs = {s.tie_breaker for s in market.schools}
    if len(tbs) > 1:
        raise MarketError("serial dictatorship needs a single tie-breaker")
    prios = {p for a in market.applicants for _, p in a.type.priorities}
    if len(prios) > 1 or INELIGIBLE in prios:
        raise MarketError("serial dictatorship needs equal priorities for everyone")
    report = validate_market(market)
    if not report.ok:
        raise MarketError(f"invalid market: {report.kinds()}")
    arr = market.arrays
    v = next(iter(tbs), 1) - 1
    order = np.lexsort((np.arange(arr.n_applicants), arr.R[:, v]))
    left = arr.seats.copy()
    assigned = np.full(arr.n_applicants, -1, np.int64)
    entry = np.full(arr.n_applicants, -1, np.int64)
    last = np.full(arr.n_schools, -1, np.int64)
    turned_away = np.zeros(arr.n_schools, bool)
    for i in order:
        for k in range(arr.pref_ptr[i], arr.pref_ptr[i + 1]):
            s = arr.pref_school[k]
            if left[s] > 0:
                left[s] -= 1
                assigned[i] = s
                entry[i] = k
                last[s] = i
                break
            turned_away[s] = True
    filled = turned_away & (arr.seats > 0)
    rho = np.zeros(arr.n_schools, np.int64)
    tau = np.zeros(arr.n_schools)
    common = int(next(iter(prios), 1))
    rho[filled] = common
    tau[filled] = arr.R[last[filled], v]
    last[~filled] = -1
    return MatchOutcome(arr.applicant_ids, arr.school_ids, assigned, entry,
                        rho, tau, ~filled & (arr.seats > 0), last, arr.max_priority,
                        mechanism="serial_dictatorship", tau_slack=1.0)


@dataclass(frozen=True)
class StabilityViolation:
    applicant_id: int
    kind: str
    detail: str


def verify_stability(market: Market, outcome: MatchOutcome) -> list[StabilityViolation]:
    """Check the cutoff characterization: i gets s iff i qualifies at s and at no preferred school.

    Qualification compares (priority, tie-breaker, applicant id) against the
    worst admitted applicant, the exact form of position <= xi.
    """
    cutoffs = outcome.cutoffs
    assignment = outcome.assignment
    out: list[StabilityViolation] = []
    counts: dict[int, int] = {}
    for a in market.applicants:
        expected = None
        for s in a.type.preferences:
            school = market.school(s)
            r = a.tie_breakers.get(school.tie_breaker)
            if r is not None and cutoffs[s].admits(a.type.priority(s), r, a.id):
                expected = s
                break
        got = assignment.get(a.id)
        if got is not None:
            counts[got] = counts.get(got, 0) + 1
        if got == expected:
            continue
        if got is None:
            out.append(StabilityViolation(a.id, "unassigned but qualifies",
                                          f"qualifies at {expected}"))
        elif got not in a.type.preferences:
            out.append(StabilityViolation(a.id, "unranked school", f"assigned {got}"))
        elif expected is not None and a.type.preferences.index(expected) < a.type.preferences.index(got):
            out.append(StabilityViolation(a.id, "justified envy",
                                          f"assigned {got} but qualifies at preferred {expected}"))
        else:
            out.append(StabilityViolation(a.id, "over cutoff",
                                          f"assigned {got} without qualifying there"))
    for s, c in counts.items():
        if c > market.seats(s):
            out.append(StabilityViolation(-1, "capacity exceeded", f"school {s}: {c} > {market.seats(s)}"))
    return out
