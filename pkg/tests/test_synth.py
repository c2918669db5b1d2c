import json
import math

import numpy as np
import pytest
from scipy import stats

from tiebreak import io
from tiebreak.da import run_da
from tiebreak.distributions import CdfFamily, LinearTilt
from tiebreak.market import MarketError, School, validate_market
from tiebreak.scores import estimate_local_score, sector_score
from tiebreak.synth import (WORKED_TAUS, WORKED_TB, SynthConfig, assumption3_gaps, worked_capacities, worked_market,
                            worked_template, generate)


def test_empty_market():
    res = generate(SynthConfig(n=0, seed=1))
    assert res.market.applicants == ()
    assert res.outcome is None and "beta" not in res.truth
    assert res.truth["n_types"] == 0


def test_same_seed_same_files(tmp_path):
    cfg = SynthConfig(n=400, seed=3)
    a, b = tmp_path / "a", tmp_path / "b"
    io.write_market(generate(cfg).market, a)
    io.write_market(generate(cfg).market, b)
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir()) and len(files) >= 5
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    io.write_market(generate(SynthConfig(n=400, seed=4)).market, tmp_path / "c")
    assert (a / "tiebreakers.csv").read_bytes() != (tmp_path / "c" / "tiebreakers.csv").read_bytes()


def test_generated_market_is_valid_with_both_sectors_tagged():
    res = generate(SynthConfig(n=1000, n_schools=12, seed=5, ineligible_prob=0.1, max_priority=3,
                               priority_probs=(0.2, 0.3, 0.5)))
    assert validate_market(res.market).ok
    tagged = [s for s in res.market.schools if "GradeA" in s.tags]
    assert any("lottery" in s.tags for s in tagged) and any("screened" in s.tags for s in tagged)
    assert set(res.truth["tagged_schools"]) == {s.id for s in tagged}


def test_own_tiebreaker_layout():
    res = generate(SynthConfig(n=200, n_schools=8, own_tiebreaker=True, screened_share=0.6, outcome=None, seed=2))
    scr = [s.tie_breaker for s in res.market.schools if not res.market.is_lottery(s.id)]
    assert len(scr) == len(set(scr)) > 0


def test_tiebreaker_draws_match_configured_cdfs():
    n = 5000
    res = generate(SynthConfig(n=n, seed=11, outcome=None))
    arr = res.market.arrays
    crit = 1.36 / math.sqrt(n)
    for v in range(1, res.cdfs.n_tiebreakers + 1):
        dist = res.cdfs.dist(v)

        def F(x, dist=dist):
            # screened tie-breakers are tilted per applicant: the column follows the average CDF
            return np.array([np.mean(dist.cdf(np.full(n, xi), np.arange(n))) if isinstance(dist, LinearTilt)
                             else float(dist.cdf(xi)) for xi in np.atleast_1d(x)])
        assert stats.kstest(arr.R[:, v - 1], F).statistic < crit


def test_configured_screened_cdf_is_used():
    cfg = SynthConfig(n=3000, seed=2, outcome=None, screened_cdfs={2: {"kind": "beta", "a": 2.0, "b": 5.0}})
    res = generate(cfg)
    assert stats.kstest(res.market.arrays.R[:, 1], stats.beta(2, 5).cdf).statistic < 1.36 / math.sqrt(3000)


def test_rich_support():
    cfg = SynthConfig(n=300, n_schools=10, max_priority=2, rich_support=True, outcome=None, seed=0)
    res = generate(cfg)
    assert assumption3_gaps(res.market) == []
    assert validate_market(res.market).ok
    with pytest.raises(MarketError):
        generate(SynthConfig(n=10, n_schools=10, max_priority=2, rich_support=True, seed=0))


@pytest.mark.parametrize("bad", [dict(n=-1), dict(n_lottery=3, n_tiebreakers=2), dict(priority_probs=(0.5,)),
                                 dict(list_len=20, n_schools=10), dict(min_list_len=5, list_len=4)])
def test_config_checks(bad):
    with pytest.raises(MarketError):
        generate(SynthConfig(**bad))


def test_config_and_sidecar_round_trip(tmp_path):
    cfg = SynthConfig(n=50, seed=9, screened_cdfs={2: {"kind": "power", "k": 2.0}})
    assert SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    res = generate(cfg)
    path = tmp_path / "truth.json"
    path.write_text(res.sidecar_json())
    back = json.loads(path.read_text())
    assert back == res.truth and back["beta"] == 0.25
    assert CdfFamily.from_dict(back["cdfs"]).to_dict() == res.cdfs.to_dict()


def test_worked_fixture_cutoffs_hit_targets():
    market = worked_market(5000, seed=0)
    cut = run_da(market).cutoffs
    assert abs(cut[2].tau - 0.3) <= 0.02 and abs(cut[4].tau - 0.5) <= 0.02
    for s, tau in enumerate(WORKED_TAUS, start=1):
        assert abs(cut[s].tau - tau) <= 0.02
    assert [market.school(s).tie_breaker for s in range(1, 7)] == list(WORKED_TB)


def test_worked_capacities_agree_with_bisection_on_the_generator():
    """Solve each seat share numerically, school by school, against simulated DA."""
    tmpl = worked_template()
    n = 20_000
    market = tmpl.sample(n, seed=1)
    found = []
    for s in range(1, 7):
        lo, hi = 0.0, 1.0
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            q = found + [mid] + [0.0] * (6 - s)
            schools = [School(k, q[k - 1], WORKED_TB[k - 1], True) for k in range(1, 7)]
            cut = run_da(market.__class__(schools, market.applicants, 1, 1)).cutoffs[s]
            tau = 1.0 if cut.slack else cut.tau
            if tau < WORKED_TAUS[s - 1]:
                lo = mid
            else:
                hi = mid
        found.append(0.5 * (lo + hi))
    assert np.allclose(found, worked_capacities(), atol=0.01)


def test_score_support_is_much_smaller_than_type_count():
    res = generate(SynthConfig(n=20_000, n_schools=60, list_len=8, max_priority=3, priority_probs=(0.2, 0.3, 0.5),
                               outcome=None, seed=1))
    table = estimate_local_score(res.market, run_da(res.market))
    support = len(np.unique(sector_score(table, "GradeA")["psi"]))
    assert support <= 0.1 * res.truth["n_types"]


def test_outcome_columns_attached():
    res = generate(SynthConfig(n=500, seed=1))
    a = res.market.applicants[0]
    assert set(a.covariates) == {"w1", "w2", "p1"}
    assert set(a.outcomes) == {"y"} and set(a.enrollment) == {"c_GradeA"}
