"""Market data model: schools, applicant types, applicants and validation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

INELIGIBLE = math.inf

# Integer stand-in for an infinite priority inside the compiled arrays.
INF_PRIORITY = np.int64(1 << 40)


class MarketError(ValueError):
    """Raised when a market is malformed or a query cannot be answered."""


@dataclass(frozen=True)
class School:
    id: int
    capacity: float
    tie_breaker: int
    capacity_is_fraction: bool = False
    tags: frozenset[str] = frozenset()

    def seats(self, n_applicants: int) -> int:
        if self.capacity_is_fraction:
            return int(math.floor(n_applicants * self.capacity))
        return int(self.capacity)


@dataclass(frozen=True)
class ApplicantType:
    """Preferences and priorities; equality on both defines type grouping."""

    preferences: tuple[int, ...]
    priorities: tuple[tuple[int, float], ...]

    @classmethod
    def build(cls, preferences: Sequence[int], priorities: Mapping[int, float]) -> "ApplicantType":
        return cls(tuple(int(s) for s in preferences),
                   tuple(sorted((int(s), _norm_priority(p)) for s, p in priorities.items())))

    @cached_property
    def priority_map(self) -> dict[int, float]:
        return dict(self.priorities)

    def priority(self, school_id: int) -> float:
        return self.priority_map.get(school_id, INELIGIBLE)

    def preferred_to(self, school_id: int) -> tuple[int, ...]:
        """Schools ranked strictly above ``school_id``."""
        k = self.preferences.index(school_id)
        return self.preferences[:k]


def _norm_priority(p) -> float:
    if p is None:
        return INELIGIBLE
    if isinstance(p, str):
        if p.strip().lower() in ("inf", "infinity", "ineligible"):
            return INELIGIBLE
        p = float(p)
    if isinstance(p, float) and math.isinf(p):
        return INELIGIBLE
    if float(p) == int(p):
        return int(p)
    return float(p)


@dataclass(frozen=True)
class Applicant:
    id: int
    type: ApplicantType
    tie_breakers: Mapping[int, float]
    covariates: Mapping[str, float] = field(default_factory=dict)
    outcomes: Mapping[str, float] = field(default_factory=dict)
    enrollment: Mapping[str, float] = field(default_factory=dict)

    def __hash__(self) -> int:
        return hash(self.id)


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    applicant_id: int | None = None
    school_id: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)
    warnings: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [v.__dict__ for v in self.violations],
            "warnings": [w.__dict__ for w in self.warnings],
        }


@dataclass(frozen=True)
class MarketArrays:
    """Flat array view of a market, applicants and schools sorted by id."""

    applicant_ids: np.ndarray
    school_ids: np.ndarray
    school_tb: np.ndarray       # 0-based tie-breaker column
    school_lottery: np.ndarray
    seats: np.ndarray
    pref_ptr: np.ndarray
    pref_school: np.ndarray     # school index per ranked entry
    pref_prio: np.ndarray       # INF_PRIORITY marks ineligible
    R: np.ndarray               # (N, V), NaN where not drawn
    type_id: np.ndarray
    n_lottery: int
    max_priority: int

    @property
    def n_applicants(self) -> int:
        return len(self.applicant_ids)

    @property
    def n_schools(self) -> int:
        return len(self.school_ids)

    @property
    def n_tiebreakers(self) -> int:
        return self.R.shape[1]

    def pref_applicant(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_applicants), np.diff(self.pref_ptr))

    def pref_rank(self) -> np.ndarray:
        """1-based rank of each ranked entry."""
        starts = np.repeat(self.pref_ptr[:-1], np.diff(self.pref_ptr))
        return np.arange(len(self.pref_school)) - starts + 1

    def with_tiebreakers(self, R: np.ndarray) -> "MarketArrays":
        return MarketArrays(**{**self.__dict__, "R": np.ascontiguousarray(R, dtype=np.float64)})


@dataclass(frozen=True)
class Market:
    schools: tuple[School, ...]
    applicants: tuple[Applicant, ...]
    n_lottery: int
    max_priority: int

    def __init__(self, schools: Iterable[School], applicants: Iterable[Applicant],
                 n_lottery: int = 1, max_priority: int = 1) -> None:
        object.__setattr__(self, "schools", tuple(sorted(schools, key=lambda s: s.id)))
        object.__setattr__(self, "applicants", tuple(sorted(applicants, key=lambda a: a.id)))
        object.__setattr__(self, "n_lottery", int(n_lottery))
        object.__setattr__(self, "max_priority", int(max_priority))

    @property
    def U(self) -> int:
        return self.n_lottery

    @property
    def K(self) -> int:
        return self.max_priority

    @cached_property
    def V(self) -> int:
        return max([s.tie_breaker for s in self.schools] + [self.n_lottery, 1])

    @cached_property
    def school_map(self) -> dict[int, School]:
        return {s.id: s for s in self.schools}

    @cached_property
    def applicant_map(self) -> dict[int, Applicant]:
        return {a.id: a for a in self.applicants}

    def school(self, school_id: int) -> School:
        try:
            return self.school_map[school_id]
        except KeyError:
            raise MarketError(f"unknown school id {school_id}") from None

    def is_lottery(self, school_id: int) -> bool:
        return self.school(school_id).tie_breaker <= self.n_lottery

    def seats(self, school_id: int) -> int:
        return self.school(school_id).seats(len(self.applicants))

    def schools_with_tag(self, tag: str) -> list[int]:
        return [s.id for s in self.schools if tag in s.tags]

    def with_applicants(self, applicants: Iterable[Applicant]) -> "Market":
        return Market(self.schools, applicants, self.n_lottery, self.max_priority)

    @cached_property
    def arrays(self) -> MarketArrays:
        return compile_market(self)


def compile_market(market: Market) -> MarketArrays:
    schools = market.schools
    school_index = {s.id: k for k, s in enumerate(schools)}
    n = len(market.applicants)
    V = market.V
    groups: dict[ApplicantType, int] = {}
    type_id = np.empty(n, dtype=np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    pref_school: list[int] = []
    pref_prio: list[int] = []
    R = np.full((n, V), np.nan)
    inf = int(INF_PRIORITY)
    for i, a in enumerate(market.applicants):
        t = a.type
        type_id[i] = groups.setdefault(t, len(groups))
        pm = t.priority_map
        for s in t.preferences:
            pref_school.append(school_index[s])
            p = pm.get(s, INELIGIBLE)
            pref_prio.append(inf if p == INELIGIBLE else int(p))
        ptr[i + 1] = len(pref_school)
        for v, r in a.tie_breakers.items():
            if 1 <= v <= V:
                R[i, v - 1] = r
    return MarketArrays(
        applicant_ids=np.array([a.id for a in market.applicants], dtype=np.int64),
        school_ids=np.array([s.id for s in schools], dtype=np.int64),
        school_tb=np.array([s.tie_breaker - 1 for s in schools], dtype=np.int64),
        school_lottery=np.array([s.tie_breaker <= market.n_lottery for s in schools], dtype=np.bool_),
        seats=np.array([s.seats(n) for s in schools], dtype=np.int64),
        pref_ptr=ptr,
        pref_school=np.array(pref_school, dtype=np.int64),
        pref_prio=np.array(pref_prio, dtype=np.int64),
        R=R,
        type_id=type_id,
        n_lottery=market.n_lottery,
        max_priority=market.max_priority,
    )


def validate_market(market: Market) -> ValidationReport:
    """Collect every structural problem; the market is usable iff none are found."""
    report = ValidationReport()
    bad = report.violations.append
    K, U, V = market.max_priority, market.n_lottery, market.V

    if K < 1:
        bad(Violation("invalid K", f"max priority K={K} must be >= 1"))
    if not 1 <= U <= V:
        bad(Violation("invalid U", f"lottery count U={U} must satisfy 1 <= U <= V={V}"))

    seen: set[int] = set()
    for s in market.schools:
        if s.id in seen:
            bad(Violation("duplicate school id", f"school {s.id} listed twice", school_id=s.id))
        seen.add(s.id)
        if s.capacity < 0 or (s.capacity_is_fraction and s.capacity > 1):
            bad(Violation("invalid capacity", f"capacity {s.capacity}", school_id=s.id))
        if s.tie_breaker < 1:
            bad(Violation("invalid tie-breaker id", f"tie-breaker {s.tie_breaker}", school_id=s.id))

    seen = set()
    tb_values: dict[tuple[int, float], list[int]] = defaultdict(list)
    for a in market.applicants:
        if a.id in seen:
            bad(Violation("duplicate applicant id", f"applicant {a.id} listed twice", applicant_id=a.id))
        seen.add(a.id)
        prefs = a.type.preferences
        if len(set(prefs)) != len(prefs):
            bad(Violation("duplicate rank", f"preference list {prefs} repeats a school", applicant_id=a.id))
        for s_id in prefs:
            school = market.school_map.get(s_id)
            if school is None:
                bad(Violation("dangling school id", f"ranks unknown school {s_id}",
                              applicant_id=a.id, school_id=s_id))
                continue
            if s_id not in a.type.priority_map:
                bad(Violation("missing priority", f"no priority at ranked school {s_id}",
                              applicant_id=a.id, school_id=s_id))
            if school.tie_breaker not in a.tie_breakers:
                bad(Violation("missing tie-breaker", f"no value for tie-breaker {school.tie_breaker}",
                              applicant_id=a.id, school_id=s_id))
        for s_id, p in a.type.priorities:
            if p != INELIGIBLE and (p != int(p) or not 1 <= p <= K):
                bad(Violation("priority out of range", f"priority {p} at school {s_id} not in 1..{K} or inf",
                              applicant_id=a.id, school_id=s_id))
        for v, r in a.tie_breakers.items():
            if not (isinstance(r, (int, float)) and 0 < r <= 1):
                bad(Violation("tie-breaker out of range", f"tie-breaker {v} value {r} outside (0, 1]",
                              applicant_id=a.id))
            else:
                tb_values[(v, float(r))].append(a.id)

    for (v, r), ids in tb_values.items():
        if len(ids) > 1:
            report.warnings.append(Violation(
                "exact tie-breaker tie",
                f"tie-breaker {v} value {r} shared by applicants {sorted(ids)}; broken by ascending id"))
    return report


def scale_raw_tiebreaker(raw_values: Sequence[int]) -> list[float]:
    """Map integer tie-breaker ranks into (0, 1], preserving order; the max maps to 1."""
    if len(raw_values) == 0:
        raise MarketError("cannot scale an empty tie-breaker column")
    lo, hi = min(raw_values), max(raw_values)
    denom = hi - lo + 1
    return [(r - lo + 1) / denom for r in raw_values]


def position(applicant: Applicant, school: School) -> float:
    """Priority plus tie-breaker at ``school``; +inf when ineligible."""
    rho = applicant.type.priority(school.id)
    if rho == INELIGIBLE:
        return math.inf
    try:
        r = applicant.tie_breakers[school.tie_breaker]
    except KeyError:
        raise MarketError(
            f"applicant {applicant.id} has no value for tie-breaker {school.tie_breaker}") from None
    return rho + r


def group_types(market: Market) -> dict[ApplicantType, list[int]]:
    groups: dict[ApplicantType, list[int]] = {}
    for a in market.applicants:
        groups.setdefault(a.type, []).append(a.id)
    for ids in groups.values():
        ids.sort()
    return groups
