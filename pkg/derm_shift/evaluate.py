"""
Accuracy metrics with sampling weights and bootstrap confidence
intervals, stratified breakdowns and the multivariable
logistic-regression factor analysis.
"""

import logging
import math
from collections import namedtuple
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from derm_shift.objects import MetricResult, RegressionRow, StratumRow
from derm_shift.errors import DataError, EmptyInputError, ShapeError
from derm_shift.labels import mapAndDedup, rankWeights
import derm_shift.util as util

__all__ = (
    'MetricRow INTERCEPT topkFlags topkAccuracy variablekAccuracy kStats '
    'bootstrapCi metricResult comparatorFlags factorRegression '
    'stratifiedTable writeMetricsCsv writeRegressionCsv').split()

_logger = logging.getLogger('derm_shift.evaluate')

RIDGE = 1e-6
MAX_ITER = 100
TOL = 1e-8
ALPHA = 0.05
SEPARATION_LOG_ODDS = 10.0
INTERCEPT = '(intercept)'

MetricRow = namedtuple('MetricRow',
    'metric stratum value ci_lo ci_hi n weighted')


def bootstrapCi(correctFlags, weights=None, nBoot: int = 2000,
        level: float = 0.95, seed=0):
    """
    Percentile bootstrap interval of the (weighted) mean. Replicate i
    draws from its own stream keyed by ``(seed, i)``.
    """
    f = np.asarray(correctFlags, float)
    if not len(f):
        raise EmptyInputError('Bootstrap of an empty sample')
    w = np.ones(len(f)) if weights is None else np.asarray(weights, float)
    if np.all(f == f[0]):
        return float(f[0]), float(f[0])
    N = len(f)
    stats = np.empty(nBoot)
    for i in range(nBoot):
        idx = util.rng(seed, 'bootstrap', i).integers(0, N, N)
        stats[i] = (w[idx] @ f[idx]) / w[idx].sum()
    lo, hi = np.percentile(stats, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


def metricResult(correctFlags, weights=None, nBoot=2000, level=0.95,
        seed=0) -> MetricResult:
    """
    Weighted mean of the flags with its bootstrap interval, widened
    where needed to bracket the point estimate.
    """
    f = np.asarray(correctFlags, float)
    if not len(f):
        return MetricResult(math.nan, math.nan, math.nan, 0,
            weights is not None)
    w = np.ones(len(f)) if weights is None else np.asarray(weights, float)
    value = float((w @ f) / w.sum())
    lo, hi = bootstrapCi(f, w, nBoot, level, seed)
    return MetricResult(
        value, min(lo, value), max(hi, value), len(f), weights is not None)


def topkFlags(predictions, refs, k: int) -> np.ndarray:
    """
    Whether the reference top-1 is among the k highest scores, score
    ties broken by ascending condition id.
    """
    P = np.asarray(predictions, float)
    top1 = np.array([r if isinstance(r, (int, np.integer)) else r.top1
        for r in refs], int)
    if len(P) != len(top1):
        raise ShapeError(
            f'{len(P)} predictions but {len(top1)} reference labels')
    if not len(P):
        return np.zeros(0, bool)
    ref = P[np.arange(len(P)), top1][:, None]
    ids = np.arange(P.shape[1])[None, :]
    rank = (P > ref).sum(axis=1) + \
        ((P == ref) & (ids < top1[:, None])).sum(axis=1) + 1
    return rank <= k


def topkAccuracy(predictions, refs, k: int, weights=None,
        nBoot=2000, level=0.95, seed=0) -> MetricResult:
    """
    Top-k accuracy against the reference top-1.
    """
    flags = topkFlags(predictions, refs, k)
    if not len(flags):
        raise EmptyInputError('No predictions to score')
    return metricResult(flags, weights, nBoot, level, seed)


def variablekAccuracy(sets, refs, weights=None,
        nBoot=2000, level=0.95, seed=0) -> MetricResult:
    """
    Accuracy of variable-k prediction sets; see :func:`kStats`
    for the set sizes.
    """
    if len(sets) != len(refs):
        raise ShapeError(f'{len(sets)} prediction sets but {len(refs)} refs')
    if not len(sets):
        raise EmptyInputError('No prediction sets to score')
    flags = [r.top1 in s for s, r in zip(sets, refs)]
    return metricResult(flags, weights, nBoot, level, seed)


def kStats(sets):
    """
    Mean, first and third quartile of the prediction set sizes.
    """
    ks = np.array([s.k for s in sets], float)
    q1, q3 = np.percentile(ks, [25, 75])
    return float(ks.mean()), float(q1), float(q3)


def comparatorFlags(dataset, k: int = 3) -> np.ndarray:
    """
    Top-k correctness of the site dermatologist's own differential.
    Cases without a comparator differential count as wrong.
    """
    refs = dataset.references()
    flags = np.zeros(len(dataset), bool)
    for i, case in enumerate(dataset.cases):
        diff = rankWeights(mapAndDedup(case.comparator, dataset.taxonomy))
        top = [e.conditionId for e in diff.entries[:k]]
        flags[i] = refs[i].top1 in top
    return flags


def _designMatrix(design, factors, levels):
    columns = []
    names = []
    counts = []
    groups = []
    for factor in factors:
        values = np.array([str(row[factor]) for row in design])
        declared = [str(v) for v in levels[factor]] if factor in levels \
            else sorted(set(values))
        present = [v for v in declared if (values == v).any()]
        dropped = [v for v in declared if v not in present]
        if dropped:
            _logger.warning(
                f'Factor {factor}: levels without cases dropped: {dropped}')
        unknown = set(values) - set(declared)
        if unknown:
            raise DataError(
                f'Factor {factor} has undeclared levels {sorted(unknown)}')
        nonRef = present[1:]
        for v in nonRef:
            columns.append((values == v).astype(float))
            names.append((factor, v))
            counts.append(int((values == v).sum()))
            groups.append(len(nonRef))
    return columns, names, counts, groups


def factorRegression(
        design: Sequence[dict], outcome, factors: Optional[List[str]] = None,
        levels: Optional[Dict[str, Sequence]] = None) -> List[RegressionRow]:
    """
    Multivariable logistic regression of the 0/1 outcome on one-hot
    factors, each with its first level as reference, fitted by
    iteratively reweighted least squares with a small ridge on all
    coefficients except the intercept.

    The first row is the intercept; every factor level row carries its
    Wald standard error, two-sided p-value and whether it stays
    significant after Bonferroni correction over the factor's levels.
    """
    y = np.asarray(outcome, float)
    if len(design) != len(y):
        raise ShapeError('Design and outcome differ in length')
    if len(set(y.tolist())) < 2:
        raise DataError('Regression needs both outcome classes present')
    levels = levels or {}
    if factors is None:
        factors = list(design[0].keys()) if len(design) else []
    columns, names, counts, groups = _designMatrix(design, factors, levels)
    X = np.column_stack([np.ones(len(y))] + columns)
    P = np.full(X.shape[1], RIDGE)
    P[0] = 0.0

    beta = np.zeros(X.shape[1])
    for it in range(MAX_ITER):
        p = expit(X @ beta)
        W = p * (1 - p)
        H = (X.T * W) @ X + np.diag(P)
        grad = X.T @ (y - p) - P * beta
        delta = np.linalg.solve(H, grad)
        beta += delta
        if np.abs(delta).max() < TOL:
            break
    else:
        _logger.warning(f'IRLS stopped after {MAX_ITER} iterations')
    p = expit(X @ beta)
    H = (X.T * (p * (1 - p))) @ X + np.diag(P)
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    pValues = 2 * norm.sf(np.abs(beta / se))

    rows = [RegressionRow(
        INTERCEPT, '', float(beta[0]), float(se[0]), float(pValues[0]),
        bool(pValues[0] < ALPHA), 1, len(y), False)]
    for j, ((factor, level), n, g) in enumerate(
            zip(names, counts, groups), start=1):
        advisory = bool(abs(beta[j]) > SEPARATION_LOG_ODDS)
        if advisory:
            _logger.warning(
                f'{factor}={level}: log-odds {beta[j]:.1f}, '
                'likely perfect separation')
        rows.append(RegressionRow(
            factor, level, float(beta[j]), float(se[j]), float(pValues[j]),
            bool(pValues[j] < ALPHA / g), g, n, advisory))
    return rows


def stratifiedTable(
        correctFlags, strata: Dict[str, Sequence], weights=None,
        levels: Optional[Dict[str, Sequence]] = None,
        nBoot=2000, level=0.95, seed=0) -> List[StratumRow]:
    """
    The metric recomputed within every level of every stratifying
    factor. Declared levels without cases give a row with ``n=0``
    and NaN estimates.
    """
    f = np.asarray(correctFlags, float)
    w = None if weights is None else np.asarray(weights, float)
    levels = levels or {}
    rows = []
    for factor, values in strata.items():
        values = np.array([str(v) for v in values])
        if len(values) != len(f):
            raise ShapeError(f'Stratum {factor} has the wrong length')
        declared = [str(v) for v in levels[factor]] if factor in levels \
            else sorted(set(values))
        for v in declared:
            mask = values == v
            rows.append(StratumRow(factor, v, metricResult(
                f[mask], None if w is None else w[mask], nBoot, level, seed)))
    return rows


def writeMetricsCsv(rows: Sequence[MetricRow], path):
    """
    Metric rows as CSV with columns
    metric, stratum, value, ci_lo, ci_hi, n, weighted.
    """
    df = util.df(rows)
    if df is None:
        df = pd.DataFrame(columns=MetricRow._fields)
    df.to_csv(path, index=False)


def writeRegressionCsv(rows: Sequence[RegressionRow], path, subjects=None):
    """
    Regression rows as CSV, optionally prefixed by a subject column
    (whose correctness the regression explains).
    """
    columns = [
        'factor', 'level', 'log_odds', 'std_err', 'p_value',
        'significant_bonferroni', 'group_size', 'count', 'advisory']
    df = util.df(rows)
    if df is None:
        df = pd.DataFrame(columns=RegressionRow._fields)
    df.columns = columns
    if subjects is not None:
        df.insert(0, 'subject', list(subjects))
    df.to_csv(path, index=False)
