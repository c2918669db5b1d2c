"""Monte Carlo ground truth for local scores.

Each replicate redraws every tie-breaker, reruns DA, reclassifies applicants
against that replicate's cutoffs and records assignments per
(type, classification vector, ranked school) cell. Replicate r draws from
the stream seeded by (seed, r), and chunks of replicates are merged in
replicate order, so results do not depend on the worker count.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from . import _kernels
from .da import run_da
from .distributions import CdfFamily
from .market import Market, MarketArrays, MarketError
from .scores import Bandwidths, ScoreTable, T_LABELS, estimate_local_score

CHUNK = 250


def _delta_array(arr: MarketArrays, delta) -> np.ndarray:
    if np.ndim(delta) == 0:
        d = float(delta)
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"delta {d} outside [0, 1]")
        out = np.full(arr.n_schools, d)
    else:
        out = np.asarray(delta, dtype=float).copy()
        if out.shape != (arr.n_schools,) or np.any((out < 0) | (out > 1)):
            raise ValueError("per-school delta must lie in [0, 1] for every school")
    out[arr.school_lottery] = 0.0
    return out


def _max_len(arr: MarketArrays) -> int:
    return int(np.diff(arr.pref_ptr).max(initial=0))


def _reserve(acc, slot_key, tkeys, tslot, used: int, n: int):
    """Room for n more cells, with the hash table at most half full."""
    if used + n > acc.shape[0]:
        grow = max(acc.shape[0], n)
        acc = np.vstack([acc, np.zeros((grow, acc.shape[1]))])
        slot_key = np.concatenate([slot_key, np.empty(grow, np.int64)])
    if 2 * (used + n) > tkeys.shape[0]:
        tkeys, tslot = _kernels.cell_rehash(slot_key, used, 2 * tkeys.shape[0])
    return acc, slot_key, tkeys, tslot


def _run_chunk(arr: MarketArrays, cdfs: CdfFamily, delta: np.ndarray, seed: int, start: int, stop: int):
    n = arr.n_applicants
    L = max(_max_len(arr), 1)
    if (int(arr.type_id.max(initial=0)) + 1) * 3 ** L >= 2 ** 62:
        raise MarketError("rank lists too long for the oracle's cell encoding")
    rows = 2 * n + 16
    width = 1 + 2 * L
    acc = np.zeros((rows, width))
    slot_key = np.empty(rows, np.int64)
    n_cells = np.zeros(1, np.int64)
    cap = 1 << int(math.ceil(math.log2(4 * rows)))
    tkeys, tslot = _kernels.cell_rehash(slot_key, 0, cap)
    last_code = np.full(n, -1, np.int64)
    last_slot = np.zeros(n, np.int64)
    kappa = cdfs.tilt_matrix(n)
    R = np.empty((n, cdfs.n_tiebreakers))
    for r in range(start, stop):
        rng = np.random.default_rng([seed, r])
        if kappa is not None:
            _kernels.draw_tilted(rng, kappa, R)
        else:
            R = cdfs.draw(rng, n)
        acc, slot_key, tkeys, tslot = _reserve(acc, slot_key, tkeys, tslot, n_cells[0], n)
        _kernels.oracle_step(arr.pref_ptr, arr.pref_school, arr.pref_prio, arr.school_tb, arr.school_lottery,
                             arr.seats, R, delta, arr.n_lottery, arr.n_tiebreakers, arr.type_id,
                             tkeys, tslot, slot_key, n_cells, L, acc, last_code, last_slot)
    k = int(n_cells[0])
    acc = acc[:k]
    occ = np.repeat(acc[:, :1], L, axis=1).astype(np.int64)
    return slot_key[:k].copy(), occ, acc[:, 1:1 + L].astype(np.int64), acc[:, 1 + L:].copy()


def _chunk_job(payload):
    return _run_chunk(*payload)


@dataclass
class OracleResult:
    """Per-(type, T, school) assignment frequencies.

    ``psi_plugin`` is the mean over occupied replicates of the estimated
    score computed from that replicate's own cutoffs.
    """

    cells: pd.DataFrame
    draws: int
    seed: int
    delta: np.ndarray
    max_len: int
    meta: dict = field(default_factory=dict)

    def by_type(self) -> pd.DataFrame:
        """Frequencies conditional on type only."""
        g = self.cells.groupby(["type_id", "rank", "school_id"], sort=True)[["n", "hits"]].sum().reset_index()
        g["freq"] = g["hits"] / g["n"]
        g["se"] = np.sqrt(g["freq"] * (1 - g["freq"]) / g["n"])
        return g

    def plugin_check(self, min_occ: int = 100, z: float = 3.0) -> pd.DataFrame:
        """Cells where the mean plug-in score is compared with the assignment frequency.

        The tolerance is z binomial standard errors evaluated at the plug-in
        value, which keeps the test meaningful when the frequency is 0 or 1.
        """
        c = self.cells[self.cells["n"] >= min_occ].copy()
        c["dev"] = (c["psi_plugin"] - c["freq"]).abs()
        p = c["psi_plugin"].clip(0.0, 1.0)
        c["se_null"] = np.sqrt(p * (1 - p) / c["n"])
        c["ok"] = c["dev"] <= z * c["se_null"] + 1e-12
        return c

    def compare(self, table: ScoreTable, type_id: np.ndarray, min_occ: int = 100) -> pd.DataFrame:
        """Join one realization's scores to the oracle cells with matching (type, T, rank)."""
        L = self.max_len
        ptr = np.concatenate([[0], np.cumsum(np.bincount(table.applicant_index, minlength=table.n_applicants))])
        code = np.zeros(table.n_applicants, np.int64)
        for i in range(table.n_applicants):
            c = 0
            for k in range(ptr[i], ptr[i + 1]):
                c = c * 3 + int(table.t[k])
            code[i] = c
        key = type_id[table.applicant_index] * 3 ** L + code[table.applicant_index]
        rows = pd.DataFrame({"key": key, "rank": table.rank, "psi_hat": table.psi})
        rows = rows.drop_duplicates(["key", "rank"])
        merged = rows.merge(self.cells, on=["key", "rank"], how="inner")
        merged = merged[merged["n"] >= min_occ].copy()
        merged["dev"] = (merged["psi_hat"] - merged["freq"]).abs()
        return merged.sort_values(["key", "rank"]).reset_index(drop=True)

    def sup_deviation(self, table: ScoreTable, type_id: np.ndarray, min_occ: int = 100) -> tuple[float, float, int]:
        cmp = self.compare(table, type_id, min_occ)
        if cmp.empty:
            return 0.0, 0.0, 0
        j = int(cmp["dev"].to_numpy().argmax())
        return float(cmp["dev"].iloc[j]), float(cmp["se"].iloc[j]), len(cmp)

    def to_csv(self, path) -> None:
        self.cells.to_csv(path, index=False, float_format="%.17g")

    def to_json(self) -> str:
        return json.dumps({"draws": self.draws, "seed": self.seed, "delta": self.delta.tolist(),
                           "meta": self.meta, "cells": self.cells.to_dict(orient="list")}, sort_keys=True)


def mc_score(market: Market, cdfs: CdfFamily, delta, draws: int = 10_000, seed: int = 0,
             workers: int = 1, chunk: int = CHUNK) -> OracleResult:
    """Finite-market score frequencies for every occupied (type, T, school) cell."""
    if draws < 1:
        raise ValueError("draws must be at least 1")
    arr = market.arrays
    cdfs.validate(arr.n_applicants)
    d = _delta_array(arr, delta)
    bounds = [(s, min(s + chunk, draws)) for s in range(0, draws, chunk)]
    payloads = [(arr, cdfs, d, seed, a, b) for a, b in bounds]
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_chunk_job, payloads))
    else:
        parts = [_run_chunk(*p) for p in payloads]

    L = max(_max_len(arr), 1)
    all_keys = np.concatenate([p[0] for p in parts]) if parts else np.empty(0, np.int64)
    uniq = np.unique(all_keys)
    occ = np.zeros((len(uniq), L), np.int64)
    hits = np.zeros((len(uniq), L), np.int64)
    psi_sum = np.zeros((len(uniq), L))
    for keys, o, h, p in parts:       # chunk order fixes the float summation order
        pos = np.searchsorted(uniq, keys)    # keys are unique within a chunk
        occ[pos] += o
        hits[pos] += h
        psi_sum[pos] += p

    base = 3 ** L
    cell_type = uniq // base
    t_ids, t_first = np.unique(arr.type_id, return_index=True)
    first = dict(zip(t_ids.tolist(), t_first.tolist()))
    cell_len = np.array([arr.pref_ptr[first[int(t)] + 1] - arr.pref_ptr[first[int(t)]] for t in cell_type],
                        dtype=np.int64)
    occ[np.arange(L)[None, :] >= cell_len[:, None]] = 0     # ranks past the end of the list
    row, col = np.nonzero(occ)
    type_id = cell_type[row]
    code = uniq[row] % base
    i0 = np.array([first[int(t)] for t in type_id], dtype=np.int64)
    lens = cell_len[row]
    school = arr.school_ids[arr.pref_school[arr.pref_ptr[i0] + col]]
    tstr = [_decode(int(c), int(m)) for c, m in zip(code, lens)]
    n = occ[row, col]
    freq = hits[row, col] / n
    cells = pd.DataFrame({
        "key": uniq[row], "type_id": type_id, "T": tstr, "rank": col + 1, "school_id": school,
        "n": n, "hits": hits[row, col], "freq": freq, "se": np.sqrt(freq * (1 - freq) / n),
        "psi_plugin": psi_sum[row, col] / n,
    })
    return OracleResult(cells, draws, seed, d, L, {"n_applicants": arr.n_applicants})


def _decode(code: int, length: int) -> str:
    out = []
    for _ in range(length):
        out.append(T_LABELS[code % 3])
        code //= 3
    return "".join(reversed(out))


# -- convergence sweep -----------------------------------------------------------

@dataclass
class SweepResult:
    steps: pd.DataFrame

    def inversions(self, z: float = 2.0) -> tuple[int, bool]:
        """Count increases in the sup deviation; the second value says all are within z SE."""
        sup = self.steps["sup_dev"].to_numpy()
        se = self.steps["sup_se"].to_numpy()
        count, within = 0, True
        for k in range(len(sup) - 1):
            if sup[k + 1] > sup[k]:
                count += 1
                if sup[k + 1] - sup[k] > z * math.hypot(se[k], se[k + 1]):
                    within = False
        return count, within

    def trend_ok(self, max_inversions: int = 1, z: float = 2.0) -> bool:
        count, within = self.inversions(z)
        return count <= max_inversions and within


def check_rates(schedule: Sequence[tuple[int, float]]) -> list[str]:
    out = []
    for (n0, d0), (n1, d1) in zip(schedule, schedule[1:]):
        if not d1 <= d0:
            out.append(f"delta does not shrink from N={n0} to N={n1}")
        if not n1 * d1 > n0 * d0:
            out.append(f"N*delta does not grow from N={n0} to N={n1}")
    return out


def convergence_sweep(template, schedule: Sequence[tuple[int, float]], draws: int = 2000, seed: int = 0,
                      min_occ: int = 100, workers: int = 1) -> SweepResult:
    """Sup deviation between one realization's estimated scores and the oracle, per (N, delta)."""
    if not schedule:
        raise ValueError("schedule is empty")
    for msg in check_rates(schedule):
        warnings.warn(msg, stacklevel=2)
    rows = []
    for k, (N, delta) in enumerate(schedule):
        market = template.sample(int(N), [seed, k])
        outcome = run_da(market)
        bw = Bandwidths({s.id: float(delta) for s in market.schools}, guard=False)
        table = estimate_local_score(market, outcome, bw)
        res = mc_score(market, template.cdfs, delta, draws, seed + 7919 * (k + 1), workers)
        sup, se, ncells = res.sup_deviation(table, market.arrays.type_id, min_occ)
        rows.append({"N": int(N), "delta": float(delta), "sup_dev": sup, "sup_se": se, "cells": ncells})
    return SweepResult(pd.DataFrame(rows))
