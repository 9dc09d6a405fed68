"""Cohort statistics: Welch's t-test, VIF, Gaussian and Tweedie GLMs, BH-FDR.

The two study drivers fit one model per layer x ETDRS-sector cell:

* group study: ``thickness ~ group + age + gender + duration`` (a positive
  group coefficient means thicker in PDR);
* visual-acuity study, within one group: ``va_logmar ~ thickness + age +
  gender + duration`` (positive means thickening goes with worse vision).

Layer thickness uses a Gaussian GLM (identity link, t-based inference) and
pathology volumes a Tweedie GLM (log link, power 1.5, Wald inference with
the normal quantile).  A failed fit is recorded on its cell and the batch
carries on.  Benjamini-Hochberg adjustment runs once per family over the
cells sorted by layer then sector.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .core import LABELS, StudyRecord, label
from .errors import (
    DegenerateGroup,
    NegativeResponse,
    NonConvergence,
    OctQuantError,
    SingularDesign,
    ValidationError,
)
from .thickness import SECTORS, EtdrsSummary

ALPHA = 0.05
Z_975 = float(sps.norm.ppf(0.975))  # 1.959963984540054
TWEEDIE_POWER = 1.5
MAX_ITERS = 100
DEV_TOL = 1e-8
_RANK_TOL = 1e-10

COVARIATES = ("age", "gender", "duration")


# -- Welch --------------------------------------------------------------------

def welch_t(mean1, sd1, n1, mean2, sd2, n2):
    """Welch's unequal-variance t-test from summary statistics.

    Returns ``(t, df, p)`` with a two-sided p-value.
    """
    if n1 < 2 or n2 < 2:
        raise DegenerateGroup(f"each group needs n >= 2, got {n1} and {n2}")
    if not (sd1 > 0 and sd2 > 0):
        raise DegenerateGroup(f"standard deviations must be positive, got {sd1} and {sd2}")
    v1, v2 = sd1 * sd1 / n1, sd2 * sd2 / n2
    se = math.sqrt(v1 + v2)
    t = (mean1 - mean2) / se
    df = (v1 + v2) ** 2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    p = float(min(1.0, 2.0 * sps.t.sf(abs(t), df)))
    return float(t), float(df), p


# -- design -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Covariates ``x`` (n x k, intercept column first) and response ``y``."""

    x: np.ndarray
    y: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        x = np.array(self.x, dtype=np.float64)
        y = np.array(self.y, dtype=np.float64).ravel()
        if x.ndim != 2:
            raise ValidationError("design matrix must be 2-D")
        n, k = x.shape
        if y.shape != (n,):
            raise ValidationError(f"response length {y.size} does not match {n} rows")
        if n <= k:
            raise ValidationError(f"need more observations than columns, got n={n}, k={k}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("design contains non-finite entries")
        names = tuple(self.names) or tuple(f"x{j}" for j in range(k))
        if len(names) != k:
            raise ValidationError("one name per column required")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]


def _as_design(design, y=None) -> DesignMatrix:
    if isinstance(design, DesignMatrix):
        return design
    return DesignMatrix(design, y)


def _qr_checked(x: np.ndarray):
    q, r = np.linalg.qr(x)
    d = np.abs(np.diag(r))
    scale = np.linalg.norm(x, axis=0)
    if np.any(d <= _RANK_TOL * np.maximum(scale, 1e-300)) or np.any(scale == 0):
        raise SingularDesign("design matrix is rank deficient")
    return q, r


def vif(design) -> np.ndarray:
    """Variance inflation factors of the non-intercept columns.

    ``design`` is an n x k matrix (or ``DesignMatrix``) whose first column is
    the intercept.  ``VIF_j = 1 / (1 - R_j^2)`` with ``R_j^2`` from regressing
    column ``j`` on the intercept and the other columns.
    """
    x = design.x if isinstance(design, DesignMatrix) else np.asarray(design, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 3:
        raise ValidationError("VIF needs an intercept and at least two further columns")
    out = []
    for j in range(1, x.shape[1]):
        target = x[:, j]
        others = np.delete(x, j, axis=1)
        beta, *_ = np.linalg.lstsq(others, target, rcond=None)
        resid = target - others @ beta
        tss = float(np.sum((target - target.mean()) ** 2))
        rss = float(resid @ resid)
        if tss == 0 or rss <= _RANK_TOL * tss:
            raise SingularDesign(f"column {j} is (nearly) a linear combination of the others")
        out.append(tss / rss)
    return np.array(out)


# -- fits ---------------------------------------------------------------------

@dataclass
class FitResult:
    coef: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    p_raw: np.ndarray
    family: str
    names: tuple
    iters: int = 1
    deviance: float = 0.0
    dispersion: float = 0.0
    df_resid: int = 0
    critical: float = 0.0

    def term(self, name: str) -> dict:
        j = self.names.index(name)
        return {
            "coef": float(self.coef[j]),
            "se": float(self.se[j]),
            "ci_low": float(self.ci_low[j]),
            "ci_high": float(self.ci_high[j]),
            "p_raw": float(self.p_raw[j]),
        }

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("coef", "se", "ci_low", "ci_high", "p_raw"):
            d[k] = [float(v) for v in d[k]]
        d["names"] = list(self.names)
        return d


def _wald(coef, se, critical, dist):
    with np.errstate(divide="ignore", invalid="ignore"):
        stat = coef / se
    stat = np.where((se == 0) & (coef == 0), 0.0, stat)
    p = 2.0 * dist.sf(np.abs(stat))
    half = critical * se
    return coef - half, coef + half, np.minimum(p, 1.0)


def glm_gaussian(design, y=None) -> FitResult:
    """Ordinary least squares via QR with t-based inference on n - k df."""
    d = _as_design(design, y)
    q, r = _qr_checked(d.x)
    coef = np.linalg.solve(r, q.T @ d.y)
    resid = d.y - d.x @ coef
    df = d.n - d.k
    rss = float(resid @ resid)
    sigma2 = rss / df
    r_inv = np.linalg.solve(r, np.eye(d.k))
    cov_unscaled = r_inv @ r_inv.T
    se = np.sqrt(sigma2 * np.diag(cov_unscaled))
    crit = float(sps.t.ppf(0.975, df))
    lo, hi, p = _wald(coef, se, crit, sps.t(df))
    return FitResult(coef, se, lo, hi, p, "gaussian", d.names, 1, rss, sigma2, df, crit)


def tweedie_deviance(y, mu, power: float) -> float:
    """Total unit deviance of the Tweedie family with variance ``mu**power``."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    p = power
    if p == 0:
        dev = (y - mu) ** 2
    elif p == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(y > 0, y * np.log(y / mu), 0.0)
        dev = 2.0 * (ylog - (y - mu))
    elif p == 2:
        dev = 2.0 * (y / mu - np.log(y / mu) - 1.0)
    else:
        y_term = np.where(y > 0, np.power(np.maximum(y, 0.0), 2 - p), 0.0) / ((1 - p) * (2 - p))
        dev = 2.0 * (y_term - y * mu ** (1 - p) / (1 - p) + mu ** (2 - p) / (2 - p))
    return math.fsum(dev)


def glm_tweedie(design, y=None, power: float = TWEEDIE_POWER, link: str = "log") -> FitResult:
    """Tweedie GLM by iteratively reweighted least squares.

    Variance function ``V(mu) = mu**power``; ``link`` is ``"log"`` or
    ``"identity"``.  Iterates until the relative deviance change drops below
    1e-8 (at most 100 iterations).  The dispersion is Pearson chi^2 / (n - k)
    and intervals are Wald intervals with the normal 0.975 quantile.
    """
    d = _as_design(design, y)
    if link not in ("log", "identity"):
        raise ValidationError(f"link must be 'log' or 'identity', got {link!r}")
    if not (power == 0 or power >= 1):
        raise ValidationError(f"Tweedie power must be 0 or >= 1, got {power}")
    if power > 0 and np.any(d.y < 0):
        raise NegativeResponse("Tweedie responses must be non-negative")
    if link == "log" and not np.any(d.y > 0):
        raise NegativeResponse("log-link Tweedie fit needs at least one positive response")
    _qr_checked(d.x)

    x, yv = d.x, d.y
    if link == "log":
        # start from the intercept-only solution
        beta = np.zeros(d.k)
        beta[0] = math.log(yv.mean())
        mu = np.exp(x @ beta)
    else:
        beta, *_ = np.linalg.lstsq(x, yv, rcond=None)
        mu = x @ beta
    dev_old = tweedie_deviance(yv, mu, power) if np.all(mu > 0) or power == 0 else math.inf
    iterates = []
    converged = False
    it = 0
    for it in range(1, MAX_ITERS + 1):
        eta = x @ beta
        if link == "log":
            w = mu ** (2.0 - power)
            z = eta + (yv - mu) / mu
        else:
            w = mu ** (-power) if power else np.ones_like(mu)
            z = yv
        sw = np.sqrt(w)
        q, r = _qr_checked(x * sw[:, None])
        beta_new = np.linalg.solve(r, q.T @ (z * sw))
        eta = x @ beta_new
        mu_new = np.exp(np.clip(eta, -700, 700)) if link == "log" else eta
        if power and np.any(mu_new <= 0):
            raise NonConvergence("fitted mean left the positive domain", iterates)
        dev = tweedie_deviance(yv, mu_new, power)
        iterates.append({"iter": it, "deviance": dev, "coef": [float(b) for b in beta_new]})
        beta, mu = beta_new, mu_new
        # relative change, guarded near zero deviance as in R's glm.control
        if abs(dev - dev_old) / (abs(dev) + 0.1) < DEV_TOL:
            converged = True
            break
        dev_old = dev
    if not converged:
        raise NonConvergence(f"IRLS did not converge in {MAX_ITERS} iterations", iterates)

    v = mu ** power if power else np.ones_like(mu)
    df = d.n - d.k
    dispersion = math.fsum((yv - mu) ** 2 / v) / df
    if link == "log":
        w = mu ** (2.0 - power)
    else:
        w = 1.0 / v
    _, r = _qr_checked(x * np.sqrt(w)[:, None])
    r_inv = np.linalg.solve(r, np.eye(d.k))
    se = np.sqrt(dispersion * np.diag(r_inv @ r_inv.T))
    lo, hi, p = _wald(beta, se, Z_975, sps.norm)
    return FitResult(beta, se, lo, hi, p, f"tweedie(p={power:g},{link})", d.names, it,
                     tweedie_deviance(yv, mu, power), dispersion, df, Z_975)


# -- multiple testing ---------------------------------------------------------

def bh_fdr(p_values: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values in the original order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    m = p.size
    if m == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValidationError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.clip(ranked, 0.0, 1.0)
    # p * m / m can round below p
    return np.maximum(out, p)


# -- study drivers ------------------------------------------------------------

@dataclass
class CellResult:
    layer: str
    sector: str
    family: str
    n: int
    effect: Optional[float] = None
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    p_raw: Optional[float] = None
    p_fdr: Optional[float] = None
    significant_raw: bool = False
    significant_fdr: bool = False
    error: Optional[str] = None

    @property
    def stat(self) -> Optional[float]:
        if self.effect is None or not self.se:
            return None
        return self.effect / self.se


CELL_COLUMNS = (
    "layer", "sector", "family", "n", "effect", "se", "ci_low", "ci_high",
    "p_raw", "p_fdr", "significant_raw", "significant_fdr", "error",
)


@dataclass
class StudyReport:
    study: str
    term: str
    cells: list
    group: Optional[int] = None
    alpha: float = ALPHA
    n_subjects: int = 0
    covariate_vif: Optional[dict] = None
    notes: list = field(default_factory=list)

    def cell(self, layer: str, sector: str) -> CellResult:
        for c in self.cells:
            if c.layer == layer and c.sector == sector:
                return c
        raise KeyError((layer, sector))

    def rows(self) -> list[dict]:
        return [asdict(c) for c in self.cells]

    def to_json(self) -> dict:
        return {
            "study": self.study,
            "term": self.term,
            "group": self.group,
            "alpha": self.alpha,
            "n_subjects": self.n_subjects,
            "covariate_vif": self.covariate_vif,
            "notes": list(self.notes),
            "cells": self.rows(),
        }


def _layer_key(name: str) -> int:
    return label(name).id


def _family_for(layer: str, families: Optional[dict]) -> str:
    if families and layer in families:
        fam = families[layer]
    else:
        fam = "tweedie" if label(layer).is_pathology else "gaussian"
    if fam not in ("gaussian", "tweedie"):
        raise ValidationError(f"unknown family {fam!r} for {layer}")
    return fam


def _index_summaries(cohort, summaries):
    by_subject: dict = {}
    for s in summaries:
        if s.subject_id is None:
            raise ValidationError("ETDRS summaries need a subject_id")
        by_subject.setdefault(s.subject_id, {})[label(s.layer).name] = s
    layers = sorted({name for d in by_subject.values() for name in d}, key=_layer_key)
    for rec in cohort:
        have = by_subject.get(rec.subject_id, {})
        missing = [name for name in layers if name not in have]
        if missing:
            raise ValidationError(f"subject {rec.subject_id} has no summary for {', '.join(missing)}")
    return by_subject, layers


def _cells(by_subject, layers, cohort):
    """Analysis cells sorted by layer then sector; CS dropped for mean maps."""
    out = []
    for name in layers:
        agg = {by_subject[r.subject_id][name].aggregation for r in cohort}
        if len(agg) != 1:
            raise ValidationError(f"{name}: mixed aggregation across subjects")
        excluded = agg == {"mean"}
        for sector in SECTORS:
            if excluded and sector == "CS":
                continue
            out.append((name, sector))
    return out


def _covariates(rec: StudyRecord):
    return [rec.age, float(rec.gender), rec.diabetes_duration]


def _fit_cell(x_rows, y, names, family, power, term):
    d = DesignMatrix(np.array(x_rows), np.array(y), names)
    if family == "gaussian":
        res = glm_gaussian(d)
    else:
        res = glm_tweedie(d, power=power, link="log")
    return res.term(term)


def _run_cells(cells, build, family_of, power, term, workers):
    """Fit every cell, then adjust p-values per family."""

    def one(cell):
        layer, sector = cell
        fam = family_of(layer)
        try:
            x_rows, y, names = build(layer, sector)
            res = _fit_cell(x_rows, y, names, fam, power, term)
            return CellResult(layer, sector, fam, len(y), res["coef"], res["se"], res["ci_low"],
                              res["ci_high"], res["p_raw"])
        except OctQuantError as exc:
            return CellResult(layer, sector, fam, 0, error=f"{type(exc).__name__}: {exc}")
        except np.linalg.LinAlgError as exc:
            return CellResult(layer, sector, fam, 0, error=f"SingularDesign: {exc}")

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, cells))
    else:
        results = [one(c) for c in cells]

    for fam in ("gaussian", "tweedie"):
        idx = [i for i, c in enumerate(results) if c.family == fam and c.p_raw is not None]
        if not idx:
            continue
        adj = bh_fdr([results[i].p_raw for i in idx])
        for i, a in zip(idx, adj):
            c = results[i]
            c.p_fdr = float(a)
            c.significant_raw = bool(c.p_raw < ALPHA)
            c.significant_fdr = bool(c.p_fdr < ALPHA)
    return results


def _cell_value(by_subject, rec, layer, sector):
    v = by_subject[rec.subject_id][layer].sectors.get(sector)
    if v is None:
        raise ValidationError(f"{rec.subject_id}: no valid cells in {layer}/{sector}")
    return float(v)


def _safe_vif(x):
    try:
        return vif(x)
    except OctQuantError:
        return None


def run_group_study(
    cohort: Sequence[StudyRecord],
    summaries: Sequence[EtdrsSummary],
    tweedie_power: float = TWEEDIE_POWER,
    families: Optional[dict] = None,
    workers: Optional[int] = None,
) -> StudyReport:
    """NPDR vs PDR comparison per layer x sector (coefficient of ``group``)."""
    cohort = list(cohort)
    if not cohort:
        raise ValidationError("empty cohort")
    by_subject, layers = _index_summaries(cohort, summaries)
    names = ("intercept", "group") + COVARIATES
    base = [[1.0, float(r.group)] + _covariates(r) for r in cohort]

    def build(layer, sector):
        y = [_cell_value(by_subject, r, layer, sector) for r in cohort]
        return base, y, names

    results = _run_cells(
        _cells(by_subject, layers, cohort), build,
        lambda layer: _family_for(layer, families), tweedie_power, "group", workers,
    )
    v = _safe_vif(np.array(base))
    return StudyReport(
        "group", "group", results, None, ALPHA, len(cohort),
        None if v is None else dict(zip(names[1:], map(float, v))),
    )


def run_va_study(
    cohort: Sequence[StudyRecord],
    summaries: Sequence[EtdrsSummary],
    group: int,
    workers: Optional[int] = None,
) -> StudyReport:
    """Visual acuity vs sector value within one DR group (Gaussian, coefficient of ``thickness``)."""
    if group not in (0, 1):
        raise ValidationError(f"group must be 0 (NPDR) or 1 (PDR), got {group!r}")
    sub = [r for r in cohort if r.group == group]
    if not sub:
        raise ValidationError(f"no subjects in group {group}")
    by_subject, layers = _index_summaries(sub, summaries)
    names = ("intercept", "thickness") + COVARIATES

    def build(layer, sector):
        rows = [[1.0, _cell_value(by_subject, r, layer, sector)] + _covariates(r) for r in sub]
        return rows, [r.visual_acuity for r in sub], names

    results = _run_cells(
        _cells(by_subject, layers, sub), build, lambda layer: "gaussian", TWEEDIE_POWER,
        "thickness", workers,
    )
    return StudyReport("va", "thickness", results, group, ALPHA, len(sub))
