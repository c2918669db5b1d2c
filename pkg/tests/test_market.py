import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from strategies import markets
from tiebreak.market import (Applicant, ApplicantType, Market, MarketError, School, group_types, position,
                             scale_raw_tiebreaker, validate_market)


def two_by_two(**over):
    schools = [School(1, 1, 1), School(2, 1, 2)]
    a = Applicant(1, ApplicantType.build([1, 2], {1: 1, 2: 2}), {1: 0.4, 2: 0.7})
    b = Applicant(2, ApplicantType.build([2], {2: 1}), {2: 0.2})
    return Market(over.get("schools", schools), over.get("apps", [a, b]), 1, 2)


def test_well_formed_market_has_empty_report():
    rep = validate_market(two_by_two())
    assert rep.ok and rep.violations == [] and rep.warnings == []


def test_dangling_school_id():
    a = Applicant(1, ApplicantType.build([1, 9], {1: 1, 9: 1}), {1: 0.4, 2: 0.7})
    rep = validate_market(two_by_two(apps=[a]))
    assert rep.kinds() == ["dangling school id"]
    assert rep.violations[0].school_id == 9


def test_tiebreaker_out_of_range():
    a = Applicant(1, ApplicantType.build([1], {1: 1}), {1: 1.3})
    rep = validate_market(two_by_two(apps=[a]))
    assert rep.kinds() == ["tie-breaker out of range"]


@pytest.mark.parametrize("value", [0.0, -0.1, float("nan")])
def test_tiebreaker_must_be_positive(value):
    a = Applicant(1, ApplicantType.build([1], {1: 1}), {1: value})
    assert validate_market(two_by_two(apps=[a])).kinds() == ["tie-breaker out of range"]


def test_other_violations():
    cases = {
        "missing tie-breaker": Applicant(1, ApplicantType.build([2], {2: 1}), {1: 0.5}),
        "duplicate rank": Applicant(1, ApplicantType((1, 1), ((1, 1),)), {1: 0.5}),
        "missing priority": Applicant(1, ApplicantType.build([1, 2], {1: 1}), {1: 0.5, 2: 0.5}),
    }
    for kind, app in cases.items():
        assert validate_market(two_by_two(apps=[app])).kinds() == [kind]
    for p in (0, 3, 1.5):
        app = Applicant(1, ApplicantType.build([1], {1: p}), {1: 0.5})
        assert validate_market(two_by_two(apps=[app])).kinds() == ["priority out of range"]
    bad_cap = [School(1, -1, 1), School(2, 1.5, 2, True)]
    assert validate_market(two_by_two(schools=bad_cap)).kinds() == ["invalid capacity"] * 2
    dup = [Applicant(1, ApplicantType.build([1], {1: 1}), {1: 0.5})] * 2
    assert "duplicate applicant id" in validate_market(two_by_two(apps=dup)).kinds()


def test_ineligible_priority_is_valid():
    a = Applicant(1, ApplicantType.build([1], {1: "inf"}), {1: 0.5})
    rep = validate_market(two_by_two(apps=[a]))
    assert rep.ok
    assert a.type.priority(1) == math.inf


def test_exact_tie_is_warned_not_rejected():
    a = Applicant(1, ApplicantType.build([1], {1: 1}), {1: 0.5})
    b = Applicant(2, ApplicantType.build([1], {1: 1}), {1: 0.5})
    rep = validate_market(two_by_two(apps=[a, b]))
    assert rep.ok
    assert [w.kind for w in rep.warnings] == ["exact tie-breaker tie"]


def test_scale_raw_tiebreaker_examples():
    assert scale_raw_tiebreaker([3, 1, 7]) == [3 / 7, 1 / 7, 1.0]
    assert scale_raw_tiebreaker([5]) == [1.0]
    assert scale_raw_tiebreaker(list(range(1, 11))) == pytest.approx([k / 10 for k in range(1, 11)], abs=0)
    with pytest.raises(MarketError):
        scale_raw_tiebreaker([])


@given(st.lists(st.integers(-10 ** 6, 10 ** 6), min_size=1, max_size=60))
def test_scale_raw_tiebreaker_properties(raw):
    out = scale_raw_tiebreaker(raw)
    assert all(0 < x <= 1 for x in out)
    assert out[raw.index(max(raw))] == 1.0
    for i in range(len(raw)):
        for j in range(len(raw)):
            if raw[i] < raw[j]:
                assert out[i] < out[j]


def test_position_examples():
    s = School(1, 1, 1)
    a = Applicant(1, ApplicantType.build([1], {1: 2}), {1: 0.37})
    assert position(a, s) == pytest.approx(2.37, abs=1e-15)
    b = Applicant(2, ApplicantType.build([1], {1: math.inf}), {1: 0.37})
    assert position(b, s) == math.inf
    c = Applicant(3, ApplicantType.build([1], {1: 1}), {1: 1.0})
    assert position(c, s) == 2.0
    with pytest.raises(MarketError):
        position(Applicant(4, ApplicantType.build([1], {1: 1}), {2: 0.3}), s)


@given(st.integers(1, 5), st.integers(1, 5),
       st.floats(1e-9, 1.0, exclude_min=False), st.floats(1e-9, 1.0))
def test_position_is_lexicographic(rho, rho2, r, r2):
    s = School(1, 1, 1)
    p = position(Applicant(1, ApplicantType.build([1], {1: rho}), {1: r}), s)
    q = position(Applicant(2, ApplicantType.build([1], {1: rho2}), {1: r2}), s)
    if rho < rho2:
        assert p <= q
        assert p < q or (r == 1.0 and rho2 == rho + 1)
    if rho == rho2 and r < r2:
        assert p < q


def test_group_types_examples():
    t = ApplicantType.build([1, 2], {1: 1, 2: 1})
    apps = [Applicant(2, t, {1: 0.1, 2: 0.1}), Applicant(1, t, {1: 0.2, 2: 0.3})]
    g = group_types(two_by_two(apps=apps))
    assert list(g.values()) == [[1, 2]]
    t2 = ApplicantType.build([1, 2], {1: 1, 2: 2})
    apps = [Applicant(1, t, {1: 0.1, 2: 0.1}), Applicant(2, t2, {1: 0.2, 2: 0.3})]
    assert len(group_types(two_by_two(apps=apps))) == 2
    assert group_types(two_by_two(apps=[])) == {}


@given(markets())
def test_group_types_partition_and_idempotence(market):
    g = group_types(market)
    ids = sorted(i for v in g.values() for i in v)
    assert ids == [a.id for a in market.applicants]
    for t, members in g.items():
        assert members == sorted(members)
        assert all(market.applicant_map[i].type == t for i in members)
    regrouped = group_types(market.with_applicants([market.applicant_map[v[0]] for v in g.values()]))
    assert set(regrouped) == set(g)
    # compiled type ids induce the same partition
    tid = market.arrays.type_id
    assert len(set(tid.tolist())) == len(g)


def test_fractional_capacity_floors():
    s = School(1, 0.333, 1, True)
    assert s.seats(100) == 33
    assert s.seats(0) == 0
    assert School(2, 7, 1).seats(3) == 7


@given(markets())
def test_generated_markets_validate(market):
    assert validate_market(market).ok
    arr = market.arrays
    assert arr.pref_ptr[-1] == sum(len(a.type.preferences) for a in market.applicants)
    assert np.all(np.diff(arr.applicant_ids) > 0)
