"""CSV and JSON formats for markets, matches, scores and run manifests.

Floats are written with ``repr``, the shortest string that reads back to
the same double, so a write followed by a read reproduces a market exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .da import MatchOutcome
from .market import INELIGIBLE, Applicant, ApplicantType, Market, MarketError, School, scale_raw_tiebreaker
from .scores import ScoreTable, mid_table

VERSION = "0.1.0"

MARKET_FILES = ("market.json", "schools.csv", "applicants.csv", "applicants.schema.json",
                "preferences.csv", "priorities.csv", "tiebreakers.csv")


def fmt(x) -> str:
    """Shortest round-trip text for numbers; empty for missing."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return ""
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_frame(path: Path, df: pd.DataFrame) -> None:
    write_csv(path, list(df.columns), df.itertuples(index=False, name=None))


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _num(s: str) -> float:
    return float(s) if s != "" else math.nan


def _priority(s: str):
    s = s.strip()
    if s.lower() in ("inf", "infinity", "ineligible", ""):
        return INELIGIBLE
    return int(s) if s.lstrip("-").isdigit() else float(s)


# -- market files -----------------------------------------------------------------------

def write_market(market: Market, directory: Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "market.json").write_text(json.dumps(
        {"n_lottery": market.n_lottery, "max_priority": market.max_priority}, sort_keys=True) + "\n")
    write_csv(d / "schools.csv", ["school_id", "capacity", "tiebreaker_id", "tags", "capacity_is_fraction"],
              ([s.id, s.capacity, s.tie_breaker, ";".join(sorted(s.tags)), s.capacity_is_fraction]
               for s in market.schools))
    schema = {k: sorted({c for a in market.applicants for c in getattr(a, k)})
              for k in ("covariates", "outcomes", "enrollment")}
    (d / "applicants.schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    cols = [(k, c) for k in ("covariates", "outcomes", "enrollment") for c in schema[k]]
    write_csv(d / "applicants.csv", ["applicant_id"] + [c for _, c in cols],
              ([a.id] + [getattr(a, k).get(c) for k, c in cols] for a in market.applicants))
    write_csv(d / "preferences.csv", ["applicant_id", "rank", "school_id"],
              ([a.id, r + 1, s] for a in market.applicants for r, s in enumerate(a.type.preferences)))
    write_csv(d / "priorities.csv", ["applicant_id", "school_id", "priority"],
              ([a.id, s, p] for a in market.applicants for s, p in a.type.priorities))
    write_csv(d / "tiebreakers.csv", ["applicant_id", "tiebreaker_id", "value"],
              ([a.id, v, r] for a in market.applicants for v, r in sorted(a.tie_breakers.items())))


def read_market(directory: Path, scale: bool = False, sectors: Mapping[str, Sequence[int]] | None = None) -> Market:
    """Load a market directory. ``scale`` maps raw integer tie-breaker ranks into (0, 1]."""
    d = Path(directory)
    missing = [f for f in MARKET_FILES if f != "applicants.schema.json" and not (d / f).exists()]
    if missing:
        raise MarketError(f"market directory {d} lacks {missing}")
    meta = json.loads((d / "market.json").read_text())
    extra_tags: dict[int, set[str]] = {}
    for label, ids in (sectors or {}).items():
        for s in ids:
            extra_tags.setdefault(int(s), set()).add(label)
    schools = []
    for r in read_csv(d / "schools.csv"):
        sid = int(r["school_id"])
        tags = {t for t in (r.get("tags") or "").split(";") if t} | extra_tags.get(sid, set())
        frac = r.get("capacity_is_fraction", "0").strip().lower() in ("1", "true", "yes")
        cap = float(r["capacity"])
        schools.append(School(sid, cap if frac or not cap.is_integer() else int(cap),
                              int(r["tiebreaker_id"]), frac, frozenset(tags)))
    schema_path = d / "applicants.schema.json"
    schema = json.loads(schema_path.read_text()) if schema_path.exists() else {}
    kind = {c: k for k in ("covariates", "outcomes", "enrollment") for c in schema.get(k, [])}
    attrs: dict[int, dict[str, dict[str, float]]] = {}
    order: list[int] = []
    for r in read_csv(d / "applicants.csv"):
        aid = int(r.pop("applicant_id"))
        order.append(aid)
        rec = {"covariates": {}, "outcomes": {}, "enrollment": {}}
        for c, v in r.items():
            if v == "":
                continue
            rec[kind.get(c, "covariates")][c] = float(v)
        attrs[aid] = rec
    prefs: dict[int, list[tuple[int, int]]] = {a: [] for a in order}
    for r in read_csv(d / "preferences.csv"):
        prefs.setdefault(int(r["applicant_id"]), []).append((int(r["rank"]), int(r["school_id"])))
    prios: dict[int, dict[int, float]] = {a: {} for a in order}
    for r in read_csv(d / "priorities.csv"):
        prios.setdefault(int(r["applicant_id"]), {})[int(r["school_id"])] = _priority(r["priority"])
    tb_rows = read_csv(d / "tiebreakers.csv")
    tbs: dict[int, dict[int, float]] = {a: {} for a in order}
    if scale:
        by_v: dict[int, list[tuple[int, int]]] = {}
        for r in tb_rows:
            by_v.setdefault(int(r["tiebreaker_id"]), []).append((int(r["applicant_id"]), int(float(r["value"]))))
        for v, pairs in by_v.items():
            for (aid, _), x in zip(pairs, scale_raw_tiebreaker([p for _, p in pairs])):
                tbs.setdefault(aid, {})[v] = x
    else:
        for r in tb_rows:
            tbs.setdefault(int(r["applicant_id"]), {})[int(r["tiebreaker_id"])] = float(r["value"])
    unknown = (set(prefs) | set(prios) | set(tbs)) - set(attrs)
    if unknown:
        raise MarketError(f"applicants {sorted(unknown)[:5]} appear in rank or tie-breaker files but not applicants.csv")
    apps = []
    for aid in order:
        ranked = [s for _, s in sorted(prefs[aid])]
        t = ApplicantType.build(ranked, prios[aid])
        a = attrs[aid]
        apps.append(Applicant(aid, t, tbs[aid], a["covariates"], a["outcomes"], a["enrollment"]))
    return Market(schools, apps, int(meta.get("n_lottery", 1)), int(meta.get("max_priority", 1)))


def read_sectors(path: Path) -> dict[str, list[int]]:
    """Sector labels from JSON ({label: [school ids]}) or CSV (school_id, label)."""
    p = Path(path)
    if p.suffix.lower() == ".json":
        raw = json.loads(p.read_text())
        return {str(k): [int(s) for s in v] for k, v in raw.items()}
    out: dict[str, list[int]] = {}
    for r in read_csv(p):
        out.setdefault(r["label"], []).append(int(r["school_id"]))
    return out


def read_bandwidths(spec: str | None):
    """``None`` or "default" for the rule of thumb, a number for one delta, or a CSV/JSON file."""
    if spec is None or spec == "default":
        return None
    try:
        return float(spec)
    except ValueError:
        pass
    p = Path(spec)
    if p.suffix.lower() == ".json":
        return {int(k): float(v) for k, v in json.loads(p.read_text()).items()}
    return {int(r["school_id"]): float(r["delta"]) for r in read_csv(p)}


# -- match files ------------------------------------------------------------------------

def write_match(market: Market, outcome: MatchOutcome, directory: Path) -> None:
    d = Path(directory)
    write_csv(d / "assignments.csv", ["applicant_id", "school_id"],
              ([int(a), int(outcome.school_ids[s]) if s >= 0 else None]
               for a, s in zip(outcome.applicant_ids, outcome.assigned)))
    seats = market.arrays.seats
    filled = np.bincount(outcome.assigned[outcome.assigned >= 0], minlength=len(seats))
    rows = []
    for k, (sid, c) in enumerate(outcome.cutoffs.items()):
        rows.append([sid, int(seats[k]), int(filled[k]), c.slack, c.marginal_priority, c.tau, c.xi, c.last_admitted])
    write_csv(d / "cutoffs.csv", ["school_id", "seats", "assigned", "slack", "marginal_priority", "tau", "xi",
                                  "last_admitted"], rows)
    (d / "match.json").write_text(json.dumps({"mechanism": outcome.mechanism, "tau_slack": outcome.tau_slack},
                                             sort_keys=True) + "\n")


def read_match(market: Market, directory: Path) -> MatchOutcome:
    d = Path(directory)
    arr = market.arrays
    s_index = {int(s): k for k, s in enumerate(arr.school_ids)}
    a_index = {int(a): i for i, a in enumerate(arr.applicant_ids)}
    assigned = np.full(arr.n_applicants, -1, np.int64)
    for r in read_csv(d / "assignments.csv"):
        if r["school_id"] != "":
            assigned[a_index[int(r["applicant_id"])]] = s_index[int(r["school_id"])]
    entry = np.full(arr.n_applicants, -1, np.int64)
    for i in np.flatnonzero(assigned >= 0):
        seg = arr.pref_school[arr.pref_ptr[i]:arr.pref_ptr[i + 1]]
        hit = np.flatnonzero(seg == assigned[i])
        if len(hit) == 0:
            raise MarketError(f"applicant {arr.applicant_ids[i]} assigned to an unranked school")
        entry[i] = arr.pref_ptr[i] + hit[0]
    S = arr.n_schools
    rho = np.zeros(S, np.int64)
    tau = np.zeros(S)
    slack = np.zeros(S, bool)
    last = np.full(S, -1, np.int64)
    for r in read_csv(d / "cutoffs.csv"):
        k = s_index[int(r["school_id"])]
        slack[k] = r["slack"] == "1"
        if not slack[k]:
            rho[k] = int(r["marginal_priority"])
            tau[k] = float(r["tau"])
        if r["last_admitted"] != "":
            last[k] = a_index[int(r["last_admitted"])]
    meta_path = d / "match.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return MatchOutcome(arr.applicant_ids, arr.school_ids, assigned, entry, rho, tau, slack, last,
                        arr.max_priority, meta.get("mechanism", "da"), float(meta.get("tau_slack", 0.0)))


# -- score files ------------------------------------------------------------------------

def score_rows(market: Market, outcome: MatchOutcome, table: ScoreTable, psi: np.ndarray | None = None):
    """Rows of scores.csv; MIDs are computed once per (type, school)."""
    psi = table.psi if psi is None else psi
    cutoffs = outcome.cutoffs
    type_id = market.arrays.type_id
    cache: dict[tuple[int, int], str] = {}
    labels = table.t_labels
    for k in range(len(table.psi)):
        i = int(table.applicant_index[k])
        sid = int(table.school_ids[k])
        key = (int(type_id[i]), sid)
        mids = cache.get(key)
        if mids is None:
            atype = market.applicants[i].type
            mt = mid_table(atype, sid, cutoffs, market)
            mids = json.dumps({str(v): m.value for v, m in mt.items()}, separators=(",", ":"))
            cache[key] = mids
        p = float(psi[k])
        yield [int(table.applicant_ids[k]), sid, int(table.rank[k]), labels[k], p, 0.0 < p < 1.0,
               int(table.m[k]), float(table.sigma[k]), float(table.lam[k]), mids]


SCORE_HEADER = ["applicant_id", "school_id", "rank", "t", "psi", "risk", "m", "sigma", "lambda", "mid_vs"]


def write_scores(market: Market, outcome: MatchOutcome, table: ScoreTable, path: Path,
                 psi: np.ndarray | None = None) -> None:
    write_csv(path, SCORE_HEADER, score_rows(market, outcome, table, psi))


def read_scores(path: Path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"t": str, "mid_vs": str}, keep_default_na=False,
                     converters={"psi": float, "sigma": float, "lambda": float})
    return df


def table_from_scores(market: Market, df: pd.DataFrame) -> ScoreTable:
    """Rebuild the parts of a ScoreTable that oracle comparisons need from scores.csv."""
    arr = market.arrays
    a_index = {int(a): i for i, a in enumerate(arr.applicant_ids)}
    code = {"n": 0, "a": 1, "c": 2}
    df = df.sort_values(["applicant_id", "rank"], kind="stable")
    n = len(df)
    return ScoreTable(
        applicant_index=np.array([a_index[int(a)] for a in df["applicant_id"]], np.int64),
        applicant_ids=df["applicant_id"].to_numpy(np.int64),
        school_ids=df["school_id"].to_numpy(np.int64),
        rank=df["rank"].to_numpy(np.int64),
        t=np.array([code[x] for x in df["t"]], np.int64),
        psi=df["psi"].to_numpy(float),
        m=df["m"].to_numpy(np.int64),
        sigma=df["sigma"].to_numpy(float),
        lam=df["lambda"].to_numpy(float),
        mid_own=np.zeros(n),
        deltas={}, bandwidth_source={},
        school_tags={s.id: s.tags for s in market.schools},
        n_applicants=arr.n_applicants,
    )


# -- manifests and output directories ---------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def input_digests(paths: Iterable[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file():
                    out[f"{p.name}/{f.name}"] = file_digest(f)
        elif p.exists():
            out[p.name] = file_digest(p)
    return out


@dataclass
class RunManifest:
    command: str
    inputs: dict[str, str] = field(default_factory=dict)    # name -> sha256
    seed: int | None = None
    bandwidths: object = None
    sectors: dict | None = None
    params: dict = field(default_factory=dict)
    version: str = VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


class OutputDir:
    """Stage outputs in a sibling temp directory and move them into place only on success.

    An existing non-empty destination is refused, so earlier runs are never overwritten.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        if self.path.exists() and (not self.path.is_dir() or any(self.path.iterdir())):
            raise FileExistsError(f"output directory {self.path} exists and is not empty")

    def __enter__(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.path.name}.", dir=self.path.parent))
        self.tmp.chmod(0o755)
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return
        if self.path.exists():
            self.path.rmdir()
        os.replace(self.tmp, self.path)
