import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strategies import make_market, markets
from tiebreak.da import Cutoff, MatchOutcome, run_da
from tiebreak.distributions import Power
from tiebreak.market import Applicant, ApplicantType, Market, MarketError, School
from tiebreak.scores import (Bandwidths, apply_guard, bandwidth_rule, classify, classify_applicant, compute_mid,
                             da_global_score, default_bandwidth, estimate_local_score, lam, local_score, m_count,
                             mid_table, sd_global_score, sector_score, sigma, single_lottery_score)
from tiebreak.synth import WORKED_TAUS, worked_cutoffs, worked_focal_market

WORKED_EXPECTED = (0.0, 0.3, 0.35, 0.10, 0.125, 0.125)


def outcome_with(market, cuts):
    """MatchOutcome carrying hand-set cutoffs {school: (rho, tau, slack)}; nobody assigned."""
    arr = market.arrays
    rho = np.array([cuts[int(s)][0] for s in arr.school_ids], np.int64)
    tau = np.array([cuts[int(s)][1] for s in arr.school_ids], float)
    slack = np.array([cuts[int(s)][2] for s in arr.school_ids], bool)
    n = arr.n_applicants
    return MatchOutcome(arr.applicant_ids, arr.school_ids, np.full(n, -1), np.full(n, -1),
                        rho, tau, slack, np.where(slack, -1, 0), market.max_priority)


def worked_classification(delta=0.02, tau2=0.3, tau4=0.5):
    market, outcome = worked_focal_market(tau2, tau4, delta)
    a = market.applicants[0]
    cut = outcome.cutoffs
    t = {s: classify_applicant(market, a, s, cut, delta) for s in range(1, 7)}
    return market, outcome, a, cut, t


def test_classify_examples():
    c = Cutoff(1.5, 1, 0.5, False, 1)
    assert classify(1, 0.99, c, lottery=True) == "c"
    assert classify(2, 0.01, c, lottery=True) == "n"
    assert classify(2, 0.01, c, lottery=False, delta=0.1) == "n"
    assert classify(1, 0.5, c, lottery=False, delta=0.1) == "c"
    assert classify(1, 0.6, c, lottery=False, delta=0.1) == "c"
    assert classify(1, 0.61, c, lottery=False, delta=0.1) == "n"
    assert classify(1, 0.4, c, lottery=False, delta=0.1) == "a"
    assert classify(0, 0.9, c, lottery=False, delta=0.1) == "a"
    assert classify(1, 0.5, c, lottery=False, delta=0.0) == "a"
    assert classify(math.inf, 0.1, c, lottery=False) == "n"
    assert classify(1, 0.9, Cutoff(3.0, 3, 0.0, True), lottery=False) == "a"
    with pytest.raises(MarketError):
        classify(1, None, c, lottery=False)


def test_worked_classification_vector():
    *_, t = worked_classification()
    assert tuple(t[s] for s in range(1, 7)) == ("n", "c", "c", "c", "c", "a")


def test_mid_examples():
    market, _, a, cut, t = worked_classification()
    assert compute_mid(a.type, 1, 2, cut, market).value == 0.0
    mid = compute_mid(a.type, 4, 1, cut, market)
    assert (mid.value, mid.school) == (0.3, 2)
    # a preferred school cleared at a better priority sets MID to 1
    t2 = ApplicantType.build([1, 2], {1: 1, 2: 1})
    m2 = Market([School(1, 1, 1), School(2, 1, 1)], [Applicant(1, t2, {1: 0.5})], 1, 2)
    cuts = {1: Cutoff(2.4, 2, 0.4, False, 1), 2: Cutoff(1.4, 1, 0.4, False, 1)}
    assert compute_mid(t2, 2, 1, cuts, m2).value == 1.0
    cuts[1] = Cutoff(3.0, 3, 0.0, True)
    assert compute_mid(t2, 2, 1, cuts, m2).value == 1.0
    t3 = ApplicantType.build([1, 2], {1: math.inf, 2: 1})
    assert compute_mid(t3, 2, 1, cuts, m2).value == 0.0
    with pytest.raises(MarketError):
        compute_mid(t2, 3, 1, cuts, m2)
    with pytest.raises(MarketError):
        compute_mid(t2, 2, 7, cuts, m2)


def test_m_sigma_lambda_examples():
    market, _, a, cut, t = worked_classification()
    assert m_count(mid_table(a.type, 1, cut, market), t, 1) == 0
    assert m_count(mid_table(a.type, 5, cut, market), t, 1) == 1
    assert m_count(mid_table(a.type, 6, cut, market), t, 1) == 2
    assert (sigma(0), sigma(1), sigma(2)) == (1.0, 0.5, 0.25)
    with pytest.raises(ValueError):
        sigma(-1)
    assert lam({}, 1) == 1.0
    assert lam({1: 0.3}, 1) == 0.7
    assert lam({1: 0.5, 2: 0.5}, 2) == 0.25
    assert lam({1: 0.5, 2: 0.5}, 1) == 0.5


def test_worked_golden_values():
    market, outcome, a, cut, t = worked_classification()
    got = [local_score(a.type, t, s, cut, market) for s in range(1, 7)]
    assert got == pytest.approx(WORKED_EXPECTED, abs=1e-12)
    assert sum(got) == pytest.approx(1.0, abs=1e-12)
    table = estimate_local_score(market, outcome, Bandwidths({s: 0.02 for s in range(1, 7)}, guard=False))
    assert table.psi.tolist() == pytest.approx(WORKED_EXPECTED, abs=1e-12)
    assert "".join(table.t_labels) == "ncccca"


def test_worked_identity_on_grid():
    sympy = pytest.importorskip("sympy")
    t2, t4 = sympy.symbols("tau2 tau4", positive=True)
    half = sympy.Rational(1, 2)
    # sum-to-one identity in both orderings of the two lottery cutoffs
    below = t2 + half * (1 - t2) + half * (t4 - t2) + 2 * half ** 2 * (1 - t4)
    above = t2 + half * (1 - t2) + 2 * half ** 2 * (1 - t2)
    assert sympy.simplify(below - 1) == 0
    assert sympy.simplify(above - 1) == 0
    f_below, f_above = sympy.lambdify((t2, t4), below), sympy.lambdify((t2, t4), above)
    grid = np.linspace(0.01, 0.99, 50)
    for x in grid:
        for y in grid:
            market, outcome, a, cut, t = worked_classification(tau2=float(x), tau4=float(y))
            psi = [local_score(a.type, t, s, cut, market) for s in range(1, 7)]
            expect = f_below(x, y) if x < y else f_above(x, y)
            assert sum(psi) == pytest.approx(expect, abs=1e-12)
            assert sum(psi) == pytest.approx(1.0, abs=1e-12)
            assert psi[3] == pytest.approx(0.5 * max(0.0, y - x), abs=1e-12)


def test_zero_branches_and_single_lottery():
    t = ApplicantType.build([1], {1: 1})
    m = Market([School(1, 1, 1)], [Applicant(1, t, {1: 0.5})], 1, 1)
    cut = {1: Cutoff(1.6, 1, 0.6, False, 1)}
    assert local_score(t, {1: "c"}, 1, cut, m) == 0.6
    assert local_score(t, {1: "n"}, 1, cut, m) == 0.0
    t2 = ApplicantType.build([1, 2], {1: 1, 2: 1})
    m2 = Market([School(1, 1, 1), School(2, 1, 1)], [Applicant(1, t2, {1: 0.5})], 1, 1)
    cut2 = {1: Cutoff(1.6, 1, 0.6, False, 1), 2: Cutoff(1.7, 1, 0.7, False, 1)}
    assert local_score(t2, {1: "a", 2: "c"}, 2, cut2, m2) == 0.0
    # MID of one makes the lottery factor vanish instead of dividing by zero
    cut2[1] = Cutoff(1.0, 1, 1.0, False, 1)
    assert local_score(t2, {1: "c", 2: "c"}, 2, cut2, m2) == 0.0


def test_all_slack_market():
    rng = np.random.default_rng(5)
    m = make_market(rng, n_max=30, s_max=5, p_inelig=0.0, n_min=5)
    m = Market([School(s.id, 10_000, s.tie_breaker) for s in m.schools], m.applicants, m.n_lottery, m.max_priority)
    table = estimate_local_score(m, run_da(m))
    first = table.rank == 1
    assert np.all(table.psi[first] == 1.0) and np.all(table.psi[~first] == 0.0)


def test_sector_score_examples():
    market, outcome = worked_focal_market(tags={3: {"A"}, 5: {"A"}, 6: {"A"}})
    table = estimate_local_score(market, outcome, Bandwidths({s: 0.02 for s in range(1, 7)}, guard=False))
    sec = sector_score(table, "A")
    assert sec["psi"].iloc[0] == pytest.approx(0.6, abs=1e-12)
    assert bool(sec["risk"].iloc[0])
    with pytest.raises(KeyError):
        sector_score(table, "B")


def test_sector_score_sum_and_no_rank():
    t = ApplicantType.build([1, 2, 3], {1: 1, 2: 1, 3: 1})
    t0 = ApplicantType.build([3], {3: 1})
    schools = [School(1, 1, 1, tags=frozenset({"A"})), School(2, 1, 1, tags=frozenset({"A"})), School(3, 9, 1)]
    m = Market(schools, [Applicant(1, t, {1: 0.9}), Applicant(2, t0, {1: 0.9})], 1, 1)
    out = outcome_with(m, {1: (1, 0.3, False), 2: (1, 0.5, False), 3: (0, 0.0, True)})
    table = estimate_local_score(m, out)
    assert table.score(1, 1) == pytest.approx(0.3) and table.score(1, 2) == pytest.approx(0.2)
    sec = sector_score(table, "A")
    assert sec["psi"].tolist() == pytest.approx([0.5, 0.0])
    assert sec["risk"].tolist() == [True, False]


def test_sd_global_score():
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    cuts = {1: Cutoff(1.5, 1, 0.5, False, 1), 2: Cutoff(1.8, 1, 0.8, False, 1)}
    uni = sd_global_score(t, cuts, lambda x: x)
    assert uni == pytest.approx({1: 0.5, 2: 0.3})
    assert sd_global_score(t, cuts, Power(2.0))[2] == pytest.approx(0.39, abs=1e-15)
    t_rev = ApplicantType.build([2, 1], {1: 1, 2: 1})
    assert sd_global_score(t_rev, cuts, lambda x: x)[1] == 0.0
    with pytest.raises(ValueError):
        sd_global_score(t, cuts, lambda x: 2 * x)


def test_sd_power_cdf_against_monte_carlo():
    """F(x) = x**2, tau = 0.8, MID = 0.5, checked by simulating R ~ F directly."""
    rng = np.random.default_rng(11)
    n = 200_000
    r = Power(2.0).sample(rng, n)
    hits = np.mean((r > 0.5) & (r <= 0.8))
    se = math.sqrt(0.39 * 0.61 / n)
    assert abs(hits - 0.39) <= 3 * se


def test_sd_power_cdf_in_a_finite_market():
    rng = np.random.default_rng(3)
    n = 20_000
    r = Power(2.0).sample(rng, n)
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    m = Market([School(1, 0.25, 1, True), School(2, 0.4, 1, True)],
               [Applicant(i + 1, t, {1: float(r[i])}) for i in range(n)], 1, 1)
    from tiebreak.da import run_serial_dictatorship
    out = run_serial_dictatorship(m)
    p = sd_global_score(t, out.cutoffs, Power(2.0))
    freq = np.mean(out.assigned == 1)
    se = math.sqrt(p[2] * (1 - p[2]) / n)
    assert abs(freq - p[2]) <= 3 * se


def test_da_global_score_examples():
    t = ApplicantType.build([1, 2, 3], {1: 1, 2: 1, 3: 1})
    m = Market([School(1, 1, 1), School(2, 1, 2), School(3, 1, 1)], [Applicant(1, t, {1: 0.5, 2: 0.5})], 1, 2)
    cuts = {1: Cutoff(1.2, 1, 0.2, False, 1), 2: Cutoff(1.5, 1, 0.5, False, 1), 3: Cutoff(2.3, 2, 0.3, False, 1)}
    got = da_global_score(t, cuts, m)
    assert got[3] == pytest.approx(0.4, abs=1e-15)
    # the same number from simulated independent uniform tie-breakers
    rng = np.random.default_rng(8)
    r = rng.random((200_000, 2))
    freq = np.mean((r[:, 0] > 0.2) & (r[:, 1] > 0.5))
    assert abs(freq - 0.4) <= 3 * math.sqrt(0.24 / 200_000)
    cuts[3] = Cutoff(1.3, 1, 0.3, False, 1)
    t_low = ApplicantType.build([3], {3: 2})
    assert da_global_score(t_low, cuts, m)[3] == 0.0
    t_one = ApplicantType.build([3], {3: 1})
    assert da_global_score(t_one, cuts, m)[3] == pytest.approx(0.3)


def test_bandwidth_rule_and_guard():
    assert bandwidth_rule(1000, 0.29) == pytest.approx(0.29 / 10.0, rel=1e-12)
    assert bandwidth_rule(0, 0.29) == 0.0
    # screened school with a cutoff at 0.5: four observations just below, many above
    rs = [0.46, 0.47, 0.48, 0.5] + [0.5 + 0.01 * k for k in range(1, 30)]
    t = ApplicantType.build([1], {1: 1})
    m = Market([School(1, 4, 2)], [Applicant(i + 1, t, {1: 0.5, 2: r}) for i, r in enumerate(rs)], 1, 1)
    out = run_da(m)
    assert out.cutoffs[1].tau == 0.5
    assert apply_guard(m, out, np.array([0.1]))[0] == 0.0
    table = estimate_local_score(m, out, {1: 0.1})
    assert table.deltas[1] == 0.0 and table.bandwidth_source[1] == "user+guard"


def test_default_bandwidth_matches_direct_computation():
    rng = np.random.default_rng(1)
    n = 400
    r = rng.random(n) * 0.999 + 0.001
    t = ApplicantType.build([1], {1: 1})
    m = Market([School(1, 150, 2), School(2, 10, 1)],
               [Applicant(i + 1, t, {1: 0.5, 2: float(r[i])}) for i in range(n)], 1, 1)
    out = run_da(m)
    direct = np.std(r, ddof=1) * n ** (-1 / 3)
    assert default_bandwidth(m, out, 1) == pytest.approx(direct, rel=1e-12)
    table = estimate_local_score(m, out)
    assert table.deltas[1] == pytest.approx(direct, rel=1e-12)
    assert table.deltas[2] == 0.0 and table.bandwidth_source[2] == "none"


def reference_row_scores(market, outcome, delta):
    cut = outcome.cutoffs
    out = []
    for a in market.applicants:
        t = {s: classify_applicant(market, a, s, cut, delta.get(s, 0.0)) for s in a.type.preferences}
        out.extend(local_score(a.type, t, s, cut, market) for s in a.type.preferences)
    return np.array(out)


@given(markets(), st.floats(0.0, 0.2))
def test_kernel_matches_reference_and_bounds(market, d):
    out = run_da(market)
    bw = Bandwidths({s.id: d for s in market.schools}, guard=False)
    table = estimate_local_score(market, out, bw)
    ref = reference_row_scores(market, out, table.deltas)
    assert np.allclose(table.psi, ref, rtol=0, atol=1e-12)
    assert np.all((table.psi >= 0) & (table.psi <= 1))


def separated_delta(market, outcome, d):
    """Shrink d below half the gap between cutoffs sharing a screened tie-breaker."""
    taus: dict[int, list[float]] = {}
    for s in market.schools:
        c = outcome.cutoffs[s.id]
        if not market.is_lottery(s.id) and not c.slack:
            taus.setdefault(s.tie_breaker, []).append(c.tau)
    gaps = [g for v in taus.values() for g in np.diff(np.unique(v))]
    return min([d] + [g / 2.01 for g in gaps])


@given(markets(), st.floats(0.0, 0.2))
def test_score_sums_with_separated_windows(market, d):
    out = run_da(market)
    d = separated_delta(market, out, d)
    table = estimate_local_score(market, out, Bandwidths({s.id: d for s in market.schools}, guard=False))
    assert np.all(table.totals() <= 1 + 1e-12)
    # zero cases: t = n, or an always-seated school ranked higher
    ptr = market.arrays.pref_ptr
    for i in range(len(market.applicants)):
        ts = table.t[ptr[i]:ptr[i + 1]]
        ps = table.psi[ptr[i]:ptr[i + 1]]
        assert np.all(ps[ts == 0] == 0.0)
        hit = np.flatnonzero(ts == 1)
        if len(hit):
            assert np.all(ps[hit[0] + 1:] == 0.0)
            total = ps.sum()
            assert total == pytest.approx(1.0, abs=1e-9)


@given(markets(lottery_only=True))
def test_lottery_only_specializations(market):
    out = run_da(market)
    table = estimate_local_score(market, out)
    cut = out.cutoffs
    k = 0
    for a in market.applicants:
        glob = da_global_score(a.type, cut, market)
        for s in a.type.preferences:
            assert table.psi[k] == glob[s]
            mid1 = compute_mid(a.type, s, 1, cut, market).value
            t = "acn"[[1, 2, 0].index(int(table.t[k]))]
            if not any(table.t[j] == 1 for j in range(k - a.type.preferences.index(s), k)):
                assert table.psi[k] == single_lottery_score(t, 1.0, mid1, cut[s].tau, True)
            k += 1


@given(markets(lottery_only=True), st.floats(0.0, 0.5))
def test_lottery_score_monotone_in_own_cutoff(market, bump):
    out = run_da(market)
    cut = out.cutoffs
    for a in market.applicants[:5]:
        for s in a.type.preferences:
            t = {b: classify_applicant(market, a, b, cut) for b in a.type.preferences}
            if t[s] != "c":
                continue
            base = local_score(a.type, t, s, cut, market)
            c = cut[s]
            raised = dict(cut)
            raised[s] = Cutoff(c.xi, c.marginal_priority, min(1.0, c.tau + bump), c.slack, c.last_admitted)
            assert local_score(a.type, t, s, raised, market) >= base


@pytest.mark.parametrize("r, expected", [
    (0.1, 0.0),          # below MID - delta: seated at the preferred school
    (0.3, 0.5),          # inside the MID window
    (0.5, 1.0),          # strictly between the two cutoffs
    (0.7, 0.5),          # inside the own-cutoff window
    (0.9, 0.0),          # above tau + delta
])
def test_local_serial_dictatorship_limits(r, expected):
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    m = Market([School(1, 1, 2), School(2, 1, 2)], [Applicant(1, t, {1: 0.5, 2: r})], 1, 1)
    out = outcome_with(m, {1: (1, 0.3, False), 2: (1, 0.7, False)})
    table = estimate_local_score(m, out, Bandwidths({1: 1e-3, 2: 1e-3}, guard=False))
    assert table.psi[1] == expected


def test_local_serial_dictatorship_cutoff_below_mid():
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    for r in (0.1, 0.2, 0.3, 0.6, 0.9):
        m = Market([School(1, 1, 2), School(2, 1, 2)], [Applicant(1, t, {1: 0.5, 2: r})], 1, 1)
        out = outcome_with(m, {1: (1, 0.5, False), 2: (1, 0.2, False)})
        table = estimate_local_score(m, out, Bandwidths({1: 1e-3, 2: 1e-3}, guard=False))
        assert table.psi[1] == 0.0


def test_assumption2_warning():
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    m = Market([School(1, 1, 2), School(2, 1, 2)], [Applicant(1, t, {1: 0.5, 2: 0.4})], 1, 1)
    out = outcome_with(m, {1: (1, 0.4, False), 2: (1, 0.4, False)})
    table = estimate_local_score(m, out, Bandwidths({1: 0.01, 2: 0.01}, guard=False))
    assert any("share tie-breaker cutoff" in w for w in table.warnings)


def test_mismatched_outcome_rejected():
    rng = np.random.default_rng(0)
    m1 = make_market(rng, n_min=3, n_max=10)
    m2 = make_market(rng, n_min=20)
    with pytest.raises(MarketError):
        estimate_local_score(m2, run_da(m1))


def test_invalid_bandwidth_rejected():
    market, outcome = worked_focal_market()
    with pytest.raises(ValueError):
        estimate_local_score(market, outcome, {1: 1.5})
