"""Score-controlled regressions: balance checks, OLS and 2SLS.

Designs are assembled in a fixed column order (intercept, score dummies by
ascending score, running-variable controls by school id, covariates, then
the regressors of interest). Exactly collinear columns are found with an
unpivoted Householder QR, so a column is dropped only when it lies in the
span of the columns before it, and every drop is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .da import MatchOutcome
from .market import Market
from .scores import ScoreTable, T_LABELS, sector_score

COLLINEAR_TOL = 1e-10


class EstimationError(ValueError):
    pass


# -- linear algebra -------------------------------------------------------------------

def collinear_columns(X: np.ndarray, tol: float = COLLINEAR_TOL) -> np.ndarray:
    """Boolean mask of columns spanned by earlier columns (or identically zero)."""
    if X.shape[1] == 0:
        return np.zeros(0, bool)
    norms = np.linalg.norm(X, axis=0)
    if X.shape[0] >= X.shape[1]:
        R = np.linalg.qr(X, mode="r")
        d = np.abs(np.diag(R))
    else:
        R = linalg.qr(X, mode="r")[0]
        d = np.zeros(X.shape[1])
        k = min(R.shape)
        d[:k] = np.abs(np.diag(R)[:k])
    return (norms == 0) | (d <= tol * np.maximum(norms, 1e-300))


def _prune(X: np.ndarray, names: list[str], protect: Sequence[str]) -> tuple[np.ndarray, list[str], list[str]]:
    drop = collinear_columns(X)
    # a column can look dependent only because of later ones never, but an earlier
    # dependency can hide a later one; re-check after the first pass
    while True:
        keep = ~drop
        Xk = X[:, keep]
        again = collinear_columns(Xk)
        if not again.any():
            break
        idx = np.flatnonzero(keep)[again]
        drop[idx] = True
    dropped = [n for n, d in zip(names, drop) if d]
    bad = [n for n in dropped if n in protect]
    if bad:
        raise EstimationError(f"regressors of interest are collinear with the controls: {bad}")
    return X[:, ~drop], [n for n, d in zip(names, drop) if not d], dropped


@dataclass
class FitResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray              # HC1
    se_homo: np.ndarray
    n: int
    dropped: list[str] = field(default_factory=list)
    key: list[str] = field(default_factory=list)
    first_stage: dict[str, "FitResult"] = field(default_factory=dict)
    first_stage_F: dict[str, float] = field(default_factory=dict)
    ols: "FitResult | None" = None
    method: str = "ols"

    def _ix(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def coef_of(self, name: str) -> float:
        return float(self.coef[self._ix(name)])

    def se_of(self, name: str, robust: bool = True) -> float:
        return float((self.se if robust else self.se_homo)[self._ix(name)])

    def table(self, names: Sequence[str] | None = None) -> pd.DataFrame:
        names = list(names or self.key or self.names)
        return pd.DataFrame({
            "term": names,
            "estimate": [self.coef_of(n) for n in names],
            "se": [self.se_of(n) for n in names],
            "se_homoskedastic": [self.se_of(n, robust=False) for n in names],
            "n": self.n,
        })

    def text(self) -> str:
        lines = [f"{self.method.upper()}  N = {self.n}"]
        for _, r in self.table().iterrows():
            lines.append(f"  {r['term']:<28s} {r['estimate']: .6f}  ({r['se']:.6f})")
        if self.first_stage_F:
            for k, v in self.first_stage_F.items():
                lines.append(f"  first-stage F [{k}] = {v:.2f}")
        if self.dropped:
            lines.append(f"  dropped collinear: {', '.join(self.dropped)}")
        return "\n".join(lines)


def _sandwich(Xs: np.ndarray, e: np.ndarray, R: np.ndarray, n: int, k: int):
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T                       # (X'X)^{-1}
    meat = (Xs * e[:, None] ** 2).T @ Xs
    dof = max(n - k, 1)
    v_hc1 = bread @ meat @ bread * (n / dof)
    v_homo = bread * (e @ e / dof)
    return np.sqrt(np.maximum(np.diag(v_hc1), 0.0)), np.sqrt(np.maximum(np.diag(v_homo), 0.0)), bread


def fit_ols(y: np.ndarray, X: np.ndarray, names: list[str], key: Sequence[str] = ()) -> FitResult:
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    Xk, kept, dropped = _prune(X, names, key)
    n, k = Xk.shape
    if n <= k:
        raise EstimationError(f"{n} observations for {k} parameters")
    Q, R = np.linalg.qr(Xk)
    b = linalg.solve_triangular(R, Q.T @ y)
    e = y - Xk @ b
    se, se_h, _ = _sandwich(Xk, e, R, n, k)
    return FitResult(kept, b, se, se_h, n, dropped, list(key))


def _partial_f(y, X_full, X_restricted, n) -> float:
    def rss(X):
        Q, R = np.linalg.qr(X)
        e = y - Q @ (Q.T @ y)
        return e @ e, X.shape[1]
    r1, k1 = rss(X_full)
    r0, k0 = rss(X_restricted) if X_restricted.shape[1] else (y @ y, 0)
    q = k1 - k0
    if q <= 0 or r1 <= 0:
        return float("inf") if r1 <= 0 < q else float("nan")
    return float(((r0 - r1) / q) / (r1 / (n - k1)))


def fit_2sls(y: np.ndarray, endog: np.ndarray, endog_names: list[str], instruments: np.ndarray,
             instrument_names: list[str], exog: np.ndarray, exog_names: list[str]) -> FitResult:
    """Two-stage least squares with HC1 and homoskedastic standard errors.

    The OLS benchmark regresses y on the same right-hand side with the
    treatments in place of their first-stage fits.
    """
    y = np.asarray(y, dtype=float)
    endog = np.asarray(endog, dtype=float).reshape(len(y), -1)
    instruments = np.asarray(instruments, dtype=float).reshape(len(y), -1)
    exog = np.asarray(exog, dtype=float).reshape(len(y), -1)
    W, w_names, w_dropped = _prune(exog, list(exog_names), ())
    Z_full = np.hstack([W, instruments])
    Z, z_names, z_dropped = _prune(Z_full, w_names + list(instrument_names), ())
    n_inst = sum(1 for nm in z_names if nm in instrument_names)
    if n_inst < endog.shape[1]:
        raise EstimationError(f"{n_inst} usable instruments for {endog.shape[1]} treatments")
    n = len(y)
    Q, R = np.linalg.qr(Z)
    fitted = Q @ (Q.T @ endog)
    first, fstats = {}, {}
    for j, nm in enumerate(endog_names):
        fs = fit_ols(endog[:, j], Z, z_names, [c for c in z_names if c in instrument_names])
        fs.method = "first stage"
        first[nm] = fs
        fstats[nm] = _partial_f(endog[:, j], Z, W, n)
    Xhat = np.hstack([W, fitted])
    X = np.hstack([W, endog])
    names = w_names + list(endog_names)
    k = Xhat.shape[1]
    if n <= k:
        raise EstimationError(f"{n} observations for {k} parameters")
    Qh, Rh = np.linalg.qr(Xhat)
    if np.any(np.abs(np.diag(Rh)) <= COLLINEAR_TOL * np.maximum(np.linalg.norm(Xhat, axis=0), 1e-300)):
        raise EstimationError("treatments are not identified after partialling out the controls")
    b = linalg.solve_triangular(Rh, Qh.T @ y)
    e = y - X @ b
    se, se_h, _ = _sandwich(Xhat, e, Rh, n, k)
    ols = fit_ols(y, X, names, list(endog_names))
    return FitResult(names, b, se, se_h, n, w_dropped + [d for d in z_dropped if d not in w_dropped],
                     list(endog_names), first, fstats, ols, method="2sls")


# -- frames -----------------------------------------------------------------------------

def build_rv_controls(market: Market, outcome: MatchOutcome, table: ScoreTable,
                      cohort: np.ndarray | None = None) -> pd.DataFrame:
    """Four columns per screened program: applied, in window, slope and kink in R - tau.

    Slope and kink are switched on only inside the window. With ``cohort``
    the block is repeated per cohort value.
    """
    arr = market.arrays
    n = arr.n_applicants
    screened = np.flatnonzero(~arr.school_lottery)
    cols: dict[str, np.ndarray] = {}
    s_idx = arr.pref_school
    app = table.applicant_index
    tb = arr.school_tb[s_idx]
    r = arr.R[app, tb]
    gap = r - outcome.cut_tau[s_idx]
    in_win = table.t == 2
    for k in screened:
        sid = int(arr.school_ids[k])
        rows = s_idx == k
        a = np.zeros(n)
        kk = np.zeros(n)
        slope = np.zeros(n)
        kink = np.zeros(n)
        ai = app[rows]
        a[ai] = 1.0
        w = in_win[rows]
        kk[ai] = w
        slope[ai] = np.where(w, gap[rows], 0.0)
        kink[ai] = np.where(w & (gap[rows] > 0), gap[rows], 0.0)
        block = {f"rv_a[{sid}]": a, f"rv_k[{sid}]": kk, f"rv_slope[{sid}]": slope, f"rv_kink[{sid}]": kink}
        if cohort is None:
            cols.update(block)
        else:
            for c in np.unique(cohort):
                m = (cohort == c).astype(float)
                cols.update({f"{name}:{c}": col * m for name, col in block.items()})
    return pd.DataFrame(cols, index=pd.Index(arr.applicant_ids, name="applicant_id"))


@dataclass
class EstimationFrame:
    data: pd.DataFrame                 # one row per applicant, indexed by applicant id
    families: list[str]
    rv_columns: list[str]
    rounding: float | None = None

    def psi_col(self, fam: str) -> str:
        return f"psi_{fam}"

    def d_col(self, fam: str) -> str:
        return f"D_{fam}"

    def risk_mask(self, families: Sequence[str] | None = None) -> np.ndarray:
        fams = families or self.families
        m = np.zeros(len(self.data), bool)
        for f in fams:
            p = self.data[self.psi_col(f)].to_numpy()
            m |= (p > 0) & (p < 1)
        return m

    def score_dummies(self, rows: np.ndarray, families: Sequence[str]) -> tuple[np.ndarray, list[str]]:
        blocks, names = [], []
        for f in families:
            x = self.data[self.psi_col(f)].to_numpy()[rows]
            if self.rounding:
                x = np.round(x / self.rounding) * self.rounding
            vals = np.unique(x)
            blocks.append((x[:, None] == vals[None, :]).astype(float))
            names += [f"d_{f}[{float(v)!r}]" for v in vals]
        if not blocks:
            return np.zeros((int(rows.sum()), 0)), []
        return np.hstack(blocks), names

    def controls(self, rows: np.ndarray, families: Sequence[str], covariates: Sequence[str] = ()):
        """Intercept, score dummies, running-variable controls and covariates, in that order."""
        dums, dnames = self.score_dummies(rows, families)
        rv = self.data[self.rv_columns].to_numpy(dtype=float)[rows]
        cov = self.data[list(covariates)].to_numpy(dtype=float)[rows] if covariates else np.zeros((int(rows.sum()), 0))
        X = np.hstack([np.ones((int(rows.sum()), 1)), dums, rv, cov])
        return X, ["const"] + dnames + list(self.rv_columns) + list(covariates)


def build_frame(market: Market, outcome: MatchOutcome, table: ScoreTable,
                families: Mapping[str, str] | Sequence[str], cohort_column: str | None = None,
                rounding: float | None = None) -> EstimationFrame:
    """Per-applicant frame: assignment dummies, sector scores, rv controls, covariates, outcomes.

    ``families`` maps a family name to a school tag (a plain list uses each
    tag as its own name).
    """
    fams = dict(families) if isinstance(families, Mapping) else {f: f for f in families}
    arr = market.arrays
    data = pd.DataFrame(index=pd.Index(arr.applicant_ids, name="applicant_id"))
    assigned = outcome.assigned
    for name, tag in fams.items():
        tagged = np.array([tag in s.tags for s in market.schools])
        if not tagged.any():
            raise KeyError(f"no school carries label {tag!r}")
        data[f"D_{name}"] = np.where(assigned >= 0, tagged[np.maximum(assigned, 0)], False).astype(float)
        data[f"psi_{name}"] = sector_score(table, tag)["psi"].to_numpy()
    for attr, prefix in (("covariates", ""), ("outcomes", ""), ("enrollment", "")):
        keys = sorted({k for a in market.applicants for k in getattr(a, attr)})
        for key in keys:
            data[prefix + key] = [getattr(a, attr).get(key, np.nan) for a in market.applicants]
    cohort = data[cohort_column].to_numpy() if cohort_column else None
    rv = build_rv_controls(market, outcome, table, cohort)
    data = data.join(rv)
    return EstimationFrame(data, list(fams), list(rv.columns), rounding)


# -- estimators ---------------------------------------------------------------------------

def balance_regression(frame: EstimationFrame, covariates: Sequence[str],
                       families: Sequence[str] | None = None) -> dict[str, FitResult]:
    """Regress each covariate on assignment dummies with saturated score and rv controls, risk sample only."""
    fams = list(families or frame.families)
    rows = frame.risk_mask(fams)
    X0, names0 = frame.controls(rows, fams)
    D = frame.data[[frame.d_col(f) for f in fams]].to_numpy(dtype=float)[rows]
    dn = [frame.d_col(f) for f in fams]
    out = {}
    for c in covariates:
        w = frame.data[c].to_numpy(dtype=float)[rows]
        ok = ~np.isnan(w)
        out[c] = fit_ols(w[ok], np.hstack([X0, D])[ok], names0 + dn, dn)
        out[c].method = "balance"
    return out


def raw_difference(frame: EstimationFrame, covariate: str, family: str, risk_only: bool = False) -> FitResult:
    """Difference in covariate means by assignment status, no controls."""
    rows = frame.risk_mask([family]) if risk_only else np.ones(len(frame.data), bool)
    w = frame.data[covariate].to_numpy(dtype=float)[rows]
    d = frame.data[frame.d_col(family)].to_numpy(dtype=float)[rows]
    ok = ~np.isnan(w)
    X = np.column_stack([np.ones(ok.sum()), d[ok]])
    return fit_ols(w[ok], X, ["const", frame.d_col(family)], [frame.d_col(family)])


def attrition_report(frame: EstimationFrame, outcome: str, family: str, risk_only: bool = True) -> pd.DataFrame:
    rows = frame.risk_mask([family]) if risk_only else np.ones(len(frame.data), bool)
    df = frame.data.loc[rows, [frame.d_col(family), outcome]].astype({frame.d_col(family): int})
    g = df.groupby(frame.d_col(family))[outcome]
    rep = pd.DataFrame({"n": g.size(), "missing": g.apply(lambda s: int(s.isna().sum()))})
    rep["follow_up_rate"] = 1.0 - rep["missing"] / rep["n"]
    return rep.reset_index()


def two_stage_least_squares(frame: EstimationFrame, outcome: str, treatments: Sequence[str],
                            instruments: Sequence[str], covariates: Sequence[str] = (),
                            families: Sequence[str] | None = None) -> FitResult:
    """2SLS on the risk sample with saturated score controls for every instrument family.

    ``instruments`` are family names; their assignment dummies are the
    excluded instruments. Rows missing the outcome are dropped.
    """
    fams = list(families or instruments)
    rows = frame.risk_mask(fams)
    y = frame.data[outcome].to_numpy(dtype=float)
    rows = rows & ~np.isnan(y)
    X0, names0 = frame.controls(rows, fams, covariates)
    C = frame.data[list(treatments)].to_numpy(dtype=float)[rows]
    Zn = [frame.d_col(f) for f in instruments]
    Z = frame.data[Zn].to_numpy(dtype=float)[rows]
    return fit_2sls(y[rows], C, list(treatments), Z, Zn, X0, names0)


def t_labels(t: np.ndarray) -> np.ndarray:
    return T_LABELS[t]
