"""Synthetic school-choice markets with planted structure.

Schools are lottery or screened; a latent ability draw shifts preferences
toward tagged schools and tilts screened tie-breakers, which is what makes
raw assignment comparisons confounded. Outcomes follow

    C = (1 - z) * D + z * 1[u > 0],   Y = beta * C + g_a * ability + g_u * u + eps

with z ~ Bernoulli(noncompliance) and u ~ N(0, 1) independent of the market,
so the OLS bias from u has a closed form (see ``ols_bias``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .da import Cutoff, MatchOutcome, run_da
from .distributions import CdfFamily, LinearTilt, from_dict
from .market import Applicant, ApplicantType, Market, MarketError, School

TREATMENT_TAG = "GradeA"


@dataclass
class OutcomeSpec:
    beta: float = 0.25
    noncompliance: float = 0.3
    gamma_ability: float = 0.5
    gamma_unobserved: float = 1.0
    noise_sd: float = 1.0
    confounder_noise: float = 0.5
    n_confounders: int = 2
    n_placebo: int = 1


@dataclass
class SynthConfig:
    n: int = 1000
    n_schools: int = 10
    n_lottery: int = 1
    n_tiebreakers: int = 2
    max_priority: int = 2
    list_len: int = 4
    min_list_len: int = 1
    capacity_ratio: float = 0.8
    screened_share: float = 0.4
    tag_share: float = 0.4
    priority_probs: tuple[float, ...] = (0.3, 0.7)
    ineligible_prob: float = 0.0
    n_types: int | None = None
    ability_pref: float = 1.0
    ability_tiebreak: float = 0.5
    screened_cdfs: dict[int, dict] | None = None
    rich_support: bool = False
    own_tiebreaker: bool = False
    outcome: OutcomeSpec | None = field(default_factory=OutcomeSpec)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priority_probs"] = list(self.priority_probs)
        if self.screened_cdfs is not None:
            d["screened_cdfs"] = {str(k): v for k, v in self.screened_cdfs.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("outcome") is not None:
            d["outcome"] = OutcomeSpec(**d["outcome"])
        if "priority_probs" in d:
            d["priority_probs"] = tuple(d["priority_probs"])
        if d.get("screened_cdfs") is not None:
            d["screened_cdfs"] = {int(k): v for k, v in d["screened_cdfs"].items()}
        return cls(**d)

    def check(self) -> None:
        if self.n < 0:
            raise MarketError("n must be non-negative")
        if not 1 <= self.n_lottery <= self.n_tiebreakers:
            raise MarketError("need 1 <= n_lottery <= n_tiebreakers")
        if len(self.priority_probs) != self.max_priority or not math.isclose(sum(self.priority_probs), 1.0):
            raise MarketError("priority_probs must have max_priority entries summing to 1")
        if not 1 <= self.min_list_len <= self.list_len <= self.n_schools:
            raise MarketError("need 1 <= min_list_len <= list_len <= n_schools")
        if self.rich_support and self.n_schools * self.max_priority > self.n:
            raise MarketError("rich_support needs at least one applicant per (school, priority) stratum")


@dataclass
class SynthResult:
    market: Market
    cdfs: CdfFamily
    truth: dict
    ability: np.ndarray
    outcome: MatchOutcome | None = None

    def sidecar_json(self) -> str:
        return json.dumps(self.truth, indent=2, sort_keys=True)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _school_layout(cfg: SynthConfig, rng: np.random.Generator):
    S = cfg.n_schools
    screened = rng.random(S) < cfg.screened_share
    n_scr = cfg.n_tiebreakers - cfg.n_lottery
    if n_scr == 0:
        screened[:] = False
    if cfg.own_tiebreaker:
        # every screened school gets a private tie-breaker, so no two screened cutoffs share a scale
        scr_rank = np.cumsum(screened) - 1
        tb = np.where(screened, cfg.n_lottery + 1 + scr_rank, 1 + np.arange(S) % cfg.n_lottery)
    else:
        tb = np.where(screened, cfg.n_lottery + 1 + np.arange(S) % max(n_scr, 1), 1 + np.arange(S) % cfg.n_lottery)
    tagged = rng.random(S) < cfg.tag_share
    if cfg.tag_share > 0:
        # keep both sectors represented among labelled schools
        for group in (screened, ~screened):
            if group.any() and not (tagged & group).any():
                tagged[np.flatnonzero(group)[0]] = True
    popularity = np.exp(rng.normal(0.0, 0.5, S)) * np.where(tagged, 1.5, 1.0)
    return tb.astype(int), tagged, popularity


def _draw_lists(cfg: SynthConfig, rng: np.random.Generator, popularity, tagged, ability, n):
    S = cfg.n_schools
    util = (np.log(popularity)[None, :] + cfg.ability_pref * ability[:, None] * tagged[None, :]
            + rng.gumbel(size=(n, S)))
    order = np.argsort(-util, axis=1, kind="stable")
    lengths = rng.integers(cfg.min_list_len, cfg.list_len + 1, size=n)
    prio = 1 + (rng.random((n, cfg.list_len))[:, :, None] > np.cumsum(cfg.priority_probs)[None, None, :]).sum(axis=2)
    inelig = rng.random((n, cfg.list_len)) < cfg.ineligible_prob
    return order[:, :cfg.list_len], lengths, prio, inelig


def _make_type(school_ids, row, length, prio_row, inelig_row) -> ApplicantType:
    prefs = [int(school_ids[row[j]]) for j in range(length)]
    prios = {s: (math.inf if inelig_row[j] else int(prio_row[j])) for j, s in enumerate(prefs)}
    return ApplicantType.build(prefs, prios)


def _enforce_rich_support(types: list[ApplicantType], cfg: SynthConfig, school_ids) -> list[ApplicantType]:
    have = {(t.preferences[0], t.priority(t.preferences[0])) for t in types if t.preferences}
    missing = [(int(s), r) for s in school_ids for r in range(1, cfg.max_priority + 1) if (int(s), r) not in have]
    # rewrite applicants from the end of the list so earlier draws stay untouched
    out = list(types)
    j = len(out) - 1
    for s, r in missing:
        t = out[j]
        prefs = [s] + [b for b in t.preferences if b != s]
        prefs = prefs[:max(len(t.preferences), 1)]
        prios = {b: t.priority(b) for b in prefs if b != s}
        prios[s] = r
        out[j] = ApplicantType.build(prefs, prios)
        j -= 1
    return out


def assumption3_gaps(market: Market) -> list[tuple[int, int]]:
    """(school, priority) strata with no first-ranker; empty iff rich support holds."""
    have = {(a.type.preferences[0], a.type.priority(a.type.preferences[0]))
            for a in market.applicants if a.type.preferences}
    return [(s.id, r) for s in market.schools for r in range(1, market.max_priority + 1) if (s.id, r) not in have]


def generate(cfg: SynthConfig) -> SynthResult:
    """Draw a market, tie-breakers, covariates and outcomes from ``cfg``."""
    cfg.check()
    r_layout, r_ability, r_prefs, r_types, r_tb, r_out = _streams(cfg.seed, 6)
    tb, tagged, popularity = _school_layout(cfg, r_layout)
    school_ids = np.arange(1, cfg.n_schools + 1)
    n = cfg.n
    ability = r_ability.standard_normal(n)

    if cfg.n_types:
        # finite pool; ability tilts the pool draw toward types ranking tagged schools early
        P = cfg.n_types
        order, lengths, prio, inelig = _draw_lists(cfg, r_prefs, popularity, tagged, np.zeros(P), P)
        pool = [_make_type(school_ids, order[k], lengths[k], prio[k], inelig[k]) for k in range(P)]
        lean = np.array([np.mean([tagged[s - 1] / (j + 1) for j, s in enumerate(t.preferences)]) for t in pool])
        lean = (lean - lean.mean()) / (lean.std() + 1e-12)
        logits = 2.0 * cfg.ability_pref * ability[:, None] * lean[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
        pick = (r_types.random(n)[:, None] > cum).sum(axis=1)
        pick = np.minimum(pick, P - 1)
        types = [pool[k] for k in pick]
    else:
        order, lengths, prio, inelig = _draw_lists(cfg, r_prefs, popularity, tagged, ability, n)
        types = [_make_type(school_ids, order[i], lengths[i], prio[i], inelig[i]) for i in range(n)]
    if cfg.rich_support:
        types = _enforce_rich_support(types, cfg, school_ids)

    share = popularity / popularity.sum()
    q = np.maximum(cfg.capacity_ratio * share, 1.0 / max(n, 1))
    schools = [School(int(s), float(q[k]), int(tb[k]), True,
                      frozenset({TREATMENT_TAG} if tagged[k] else set())
                      | {"lottery" if tb[k] <= cfg.n_lottery else "screened"})
               for k, s in enumerate(school_ids)]

    V = int(tb.max(initial=cfg.n_lottery)) if cfg.own_tiebreaker else cfg.n_tiebreakers
    screened = {}
    for v in range(cfg.n_lottery + 1, V + 1):
        spec = (cfg.screened_cdfs or {}).get(v)
        screened[v] = from_dict(spec) if spec else LinearTilt(-cfg.ability_tiebreak * np.tanh(ability))
    cdfs = CdfFamily(cfg.n_lottery, V, screened)
    R = cdfs.draw(r_tb, n)

    base = [Applicant(i + 1, types[i], {v: float(R[i, v - 1]) for v in range(1, V + 1)})
            for i in range(n)]
    market = Market(schools, base, cfg.n_lottery, cfg.max_priority)
    truth = {"config": cfg.to_dict(), "cdfs": cdfs.to_dict(), "n_types": len(set(types)),
             "tagged_schools": [int(s) for s in school_ids[tagged]]}
    outcome = None
    if cfg.outcome is not None and n > 0:
        outcome = run_da(market)
        market = _attach_outcomes(market, outcome, ability, cfg.outcome, r_out)
        truth["beta"] = cfg.outcome.beta
        truth["outcome"] = asdict(cfg.outcome)
    return SynthResult(market, cdfs, truth, ability, outcome)


def treatment_indicator(market: Market, outcome: MatchOutcome, tag: str = TREATMENT_TAG) -> np.ndarray:
    tagged = np.array([tag in s.tags for s in market.schools])
    a = outcome.assigned
    return np.where(a >= 0, tagged[np.maximum(a, 0)], False).astype(float)


def _attach_outcomes(market, outcome, ability, spec: OutcomeSpec, rng) -> Market:
    n = len(market.applicants)
    D = treatment_indicator(market, outcome)
    z = rng.random(n) < spec.noncompliance
    u = rng.standard_normal(n)
    C = np.where(z, (u > 0).astype(float), D)
    Y = spec.beta * C + spec.gamma_ability * ability + spec.gamma_unobserved * u + spec.noise_sd * rng.standard_normal(n)
    W = {f"w{j + 1}": ability + spec.confounder_noise * rng.standard_normal(n) for j in range(spec.n_confounders)}
    W.update({f"p{j + 1}": rng.standard_normal(n) for j in range(spec.n_placebo)})
    apps = []
    for i, a in enumerate(market.applicants):
        apps.append(Applicant(a.id, a.type, a.tie_breakers,
                              covariates={k: float(v[i]) for k, v in W.items()},
                              outcomes={"y": float(Y[i])},
                              enrollment={f"c_{TREATMENT_TAG}": float(C[i])}))
    return market.with_applicants(apps)


def ols_bias(noncompliance: float, gamma_unobserved: float, resid_var_d: float) -> float:
    """Probability limit of OLS minus beta when C is regressed with controls that saturate E[D | X].

    Only the complier-free share z * 1[u > 0] of C loads on u, so
    Cov(C, u | X) = pi * phi(0) while Var(C | X) averages to
    (1 - pi)**2 * Var(D | X) + pi * (2 - pi) / 4.
    """
    pi = noncompliance
    num = gamma_unobserved * pi * stats.norm.pdf(0.0)
    den = (1.0 - pi) ** 2 * resid_var_d + pi * (2.0 - pi) / 4.0
    return num / den


# -- templates: finite type distributions for the oracle sweep ---------------------

@dataclass
class MarketTemplate:
    """Schools with fractional capacities, types with probabilities, and tie-breaker CDFs."""

    schools: tuple[School, ...]
    types: tuple[ApplicantType, ...]
    weights: np.ndarray
    n_lottery: int
    max_priority: int
    cdfs: CdfFamily

    def sample(self, n: int, seed: int) -> Market:
        """Draw n applicants; seats are the integer part of n * q_s."""
        rng_type, rng_tb = _streams(seed, 2)
        w = np.asarray(self.weights, dtype=float)
        counts = rng_type.multinomial(n, w / w.sum())
        idx = np.repeat(np.arange(len(self.types)), counts)
        R = self.cdfs.draw(rng_tb, n)
        V = self.cdfs.n_tiebreakers
        apps = [Applicant(i + 1, self.types[k], {v: float(R[i, v - 1]) for v in range(1, V + 1)})
                for i, k in enumerate(idx)]
        return Market(self.schools, apps, self.n_lottery, self.max_priority)


def random_template(n_schools: int = 6, n_types: int = 12, n_lottery: int = 1, n_tiebreakers: int = 2,
                    max_priority: int = 2, list_len: int = 3, capacity_ratio: float = 0.7,
                    seed: int = 0) -> MarketTemplate:
    rng = np.random.default_rng(seed)
    S = n_schools
    tb = np.empty(S, dtype=int)
    for k in range(S):
        tb[k] = 1 + k % n_tiebreakers
    tb[0] = 1
    types = set()
    out = []
    while len(out) < n_types:
        prefs = rng.permutation(np.arange(1, S + 1))[:list_len].tolist()
        prios = {s: int(rng.integers(1, max_priority + 1)) for s in prefs}
        t = ApplicantType.build(prefs, prios)
        if t not in types:
            types.add(t)
            out.append(t)
    weights = rng.dirichlet(np.full(n_types, 5.0))
    q = capacity_ratio * rng.dirichlet(np.full(S, 5.0))
    schools = tuple(School(k + 1, float(q[k]), int(tb[k]), True) for k in range(S))
    return MarketTemplate(schools, tuple(out), weights, n_lottery, max_priority,
                          CdfFamily(n_lottery, n_tiebreakers))


# -- six-school worked example ---------------------------------------------------------

WORKED_TAUS = (0.2, 0.3, 0.4, 0.5, 0.6, 0.8)
WORKED_TB = (2, 1, 3, 1, 2, 3)
WORKED_T = ("n", "c", "c", "c", "c", "a")


def worked_capacities(taus: Sequence[float] = WORKED_TAUS) -> tuple[float, ...]:
    """Seat shares that produce ``taus`` as cutoffs when one type ranks schools 1..6.

    With a single priority class and independent uniform tie-breakers, the
    continuum mass seated at each school is the probability of clearing its
    cutoff after failing every earlier one.
    """
    miss = {1: 1.0, 2: 1.0, 3: 1.0}     # per tie-breaker: P(R above the running max cutoff)
    run = {1: 0.0, 2: 0.0, 3: 0.0}
    out = []
    for tau, v in zip(taus, WORKED_TB):
        others = math.prod(miss[w] for w in miss if w != v)
        out.append(max(0.0, tau - run[v]) * others)
        run[v] = max(run[v], tau)
        miss[v] = 1.0 - run[v]
    return tuple(out)


def worked_school_list(tags: dict[int, set[str]] | None = None) -> list[School]:
    q = worked_capacities()
    tags = tags or {}
    return [School(s, q[s - 1], WORKED_TB[s - 1], True, frozenset(tags.get(s, set()))) for s in range(1, 7)]


def worked_type() -> ApplicantType:
    return ApplicantType.build(range(1, 7), {s: 1 for s in range(1, 7)})


def worked_template() -> MarketTemplate:
    return MarketTemplate(tuple(worked_school_list()), (worked_type(),), np.array([1.0]), 1, 1, CdfFamily(1, 3))


def worked_market(n: int = 5000, seed: int = 0) -> Market:
    return worked_template().sample(n, seed)


def worked_cutoffs(tau2: float = 0.3, tau4: float = 0.5, others: Sequence[float] | None = None) -> dict[int, Cutoff]:
    """Engineered cutoffs, all schools filled at marginal priority 1."""
    t1, t3, t5, t6 = others if others is not None else (WORKED_TAUS[0], WORKED_TAUS[2], WORKED_TAUS[4], WORKED_TAUS[5])
    taus = (t1, tau2, t3, tau4, t5, t6)
    return {s: Cutoff(1.0 + taus[s - 1], 1, taus[s - 1], False) for s in range(1, 7)}


def worked_focal_market(tau2: float = 0.3, tau4: float = 0.5, delta: float = 0.02,
                    tags: dict[int, set[str]] | None = None) -> tuple[Market, MatchOutcome]:
    """One applicant whose classification at the engineered cutoffs is (n, c, c, c, c, a).

    The outcome is assembled directly from the cutoffs rather than from DA.
    """
    cut = worked_cutoffs(tau2, tau4)
    r2 = cut[5].tau + delta / 2        # in the window at school 5, far above school 1
    r3 = cut[3].tau                    # in the window at school 3, well below school 6
    a = Applicant(1, worked_type(), {1: 0.5, 2: r2, 3: r3})
    market = Market(worked_school_list(tags), [a], 1, 1)
    arr = market.arrays
    outcome = MatchOutcome(arr.applicant_ids, arr.school_ids,
                           np.array([-1]), np.array([-1]),
                           np.ones(6, np.int64), np.array([cut[s].tau for s in range(1, 7)]),
                           np.zeros(6, bool), np.zeros(6, np.int64), 1)
    return market, outcome
