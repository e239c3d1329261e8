import logging
import math

import numpy as np
import pandas as pd
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from derm_shift.evaluate import (
    MetricRow, INTERCEPT, topkFlags, topkAccuracy, variablekAccuracy,
    kStats, bootstrapCi, metricResult, comparatorFlags, factorRegression,
    stratifiedTable, writeMetricsCsv, writeRegressionCsv, RIDGE)
from derm_shift.predict import KThreshold, variableKSets
from derm_shift.errors import DataError, EmptyInputError, ShapeError
from derm_shift.objects import GeneratorConfig
from derm_shift.generator import SiteModel, generateSyntheticSites
from derm_shift.labels import ReferenceLabel
from derm_shift.taxonomy import defaultTaxonomy

from conftest import makeDataset, imagePosterior


def test_topk_all_first():
    probs = np.eye(4)[[0, 1, 2]]
    assert topkAccuracy(probs, [0, 1, 2], 1, nBoot=50).value == 1.0


def test_topk_just_outside():
    probs = np.tile([0.4, 0.3, 0.2, 0.1], (3, 1))
    assert topkAccuracy(probs, [2, 2, 2], 2, nBoot=50).value == 0.0
    assert topkAccuracy(probs, [2, 2, 2], 3, nBoot=50).value == 1.0


def test_topk_weighted():
    probs = np.eye(3)[[0, 0]]
    result = topkAccuracy(probs, [0, 1], 1, weights=[4, 1], nBoot=50)
    assert result.value == pytest.approx(0.8)
    assert result.weighted


def test_topk_ties_by_id():
    probs = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert list(topkFlags(probs, [1], 1)) == [False]
    assert list(topkFlags(probs, [1], 2)) == [True]
    assert list(topkFlags(probs, [0], 1)) == [True]


def test_topk_nondecreasing_in_k():
    gen = np.random.default_rng(0)
    probs = gen.dirichlet(np.ones(10), 200)
    refs = gen.integers(10, size=200)
    values = [topkAccuracy(probs, refs, k, nBoot=20).value
        for k in range(1, 11)]
    assert values == sorted(values)
    assert values[-1] == 1.0


def test_equal_weights_match_unweighted():
    gen = np.random.default_rng(1)
    probs = gen.dirichlet(np.ones(5), 100)
    refs = gen.integers(5, size=100)
    a = topkAccuracy(probs, refs, 2, nBoot=20).value
    b = topkAccuracy(probs, refs, 2, weights=np.full(100, 3.0), nBoot=20).value
    assert a == pytest.approx(b)


def test_topk_length_mismatch():
    with pytest.raises(ShapeError):
        topkFlags(np.eye(3), [0, 1], 1)
    with pytest.raises(EmptyInputError):
        topkAccuracy(np.empty((0, 3)), [], 1)


def test_variablek(tax5):
    ds = makeDataset([0, 1, 2], tax5)
    refs = ds.references()
    sets = variableKSets(np.eye(5)[[0, 1, 2]], KThreshold(0.9))
    assert variablekAccuracy(sets, refs, nBoot=20).value == 1.0
    sets = variableKSets(np.eye(5)[[4, 4, 4]], KThreshold(0.9))
    # sets are {4, 0, 1}, so only the first two cases hit
    assert variablekAccuracy(sets, refs, nBoot=20).value == \
        pytest.approx(2 / 3)
    ds = makeDataset([3, 3], tax5)
    sets = variableKSets(np.eye(5)[[4, 4]], KThreshold(0.9))
    assert variablekAccuracy(sets, ds.references(), nBoot=20).value == 0.0


def test_k_stats():
    sets = variableKSets(
        [np.eye(10)[0]] * 3 + [np.full(10, 0.1)] * 1, KThreshold(0.95))
    mean, q1, q3 = kStats(sets)
    assert mean == pytest.approx((3 * 3 + 7) / 4)
    assert q1 == 3.0


def test_bootstrap_constant():
    assert bootstrapCi(np.ones(50)) == (1.0, 1.0)
    assert bootstrapCi(np.zeros(50)) == (0.0, 0.0)


def test_bootstrap_width():
    flags = np.random.default_rng(2).random(1000) < 0.7
    lo, hi = bootstrapCi(flags, nBoot=1000, seed=3)
    assert 0.04 <= hi - lo <= 0.08
    assert lo <= flags.mean() <= hi


def test_bootstrap_deterministic():
    flags = np.random.default_rng(4).random(200) < 0.5
    assert bootstrapCi(flags, nBoot=100, seed=5) == \
        bootstrapCi(flags, nBoot=100, seed=5)


def test_metric_result_empty():
    r = metricResult([], nBoot=10)
    assert r.n == 0 and math.isnan(r.value)


def test_metric_result_brackets():
    flags = np.random.default_rng(6).random(30) < 0.5
    r = metricResult(flags, nBoot=30, seed=1)
    assert r.ciLo <= r.value <= r.ciHi


def test_comparator(tax5):
    ds = makeDataset([0, 1], tax5, comparator=[(1, 5), (2, 4), (3, 3), (0, 1)])
    assert list(comparatorFlags(ds, 3)) == [False, True]
    assert list(comparatorFlags(ds, 4)) == [True, True]


def _rows(pairs):
    return [{'g': g} for g, _ in pairs], [y for _, y in pairs]


def test_regression_two_by_two():
    pairs = [('x', 1)] * 20 + [('x', 0)] * 10 + \
        [('ref', 1)] * 5 + [('ref', 0)] * 15
    design, y = _rows(pairs)
    rows = factorRegression(design, y, ['g'], {'g': ['ref', 'x']})
    assert rows[0].factor == INTERCEPT
    assert rows[1].level == 'x'
    assert rows[1].logOdds == pytest.approx(math.log(6), abs=1e-3)
    assert rows[1].count == 30
    assert rows[1].groupSize == 1


def test_regression_intercept_only():
    y = [1] * 30 + [0] * 70
    rows = factorRegression([{}] * 100, y, [])
    assert len(rows) == 1
    assert rows[0].logOdds == pytest.approx(math.log(0.3 / 0.7), abs=1e-6)


def test_regression_null_effect():
    pairs = [('a', 1)] * 2000 + [('a', 0)] * 1334 + \
        [('b', 1)] * 2000 + [('b', 0)] * 1333 + \
        [('c', 1)] * 2000 + [('c', 0)] * 1333
    design, y = _rows(pairs)
    rows = factorRegression(design, y, ['g'], {'g': ['a', 'b', 'c']})
    for row in rows[1:]:
        assert abs(row.logOdds) < 0.1
        assert not row.significantBonferroni
        assert row.groupSize == 2


def test_regression_against_direct_optimizer():
    gen = np.random.default_rng(7)
    n = 500
    sex = gen.choice(['female', 'male'], n)
    band = gen.choice(['I/II', 'III/IV', 'V/VI'], n)
    eta = -0.3 + 0.8 * (sex == 'male') - 0.6 * (band == 'V/VI') + \
        0.4 * (band == 'III/IV')
    y = (gen.random(n) < expit(eta)).astype(int)
    design = [{'sex': s, 'efst': b} for s, b in zip(sex, band)]
    rows = factorRegression(design, y, ['sex', 'efst'],
        {'sex': ['female', 'male'], 'efst': ['I/II', 'III/IV', 'V/VI']})

    X = np.column_stack([np.ones(n), sex == 'male', band == 'III/IV',
        band == 'V/VI']).astype(float)
    penalty = np.array([0.0, RIDGE, RIDGE, RIDGE])

    def objective(b):
        z = X @ b
        nll = np.sum(np.logaddexp(0, z) - y * z) + 0.5 * penalty @ (b * b)
        grad = X.T @ (expit(z) - y) + penalty * b
        return nll, grad

    direct = minimize(objective, np.zeros(4), jac=True, method='BFGS',
        options={'gtol': 1e-10}).x
    np.testing.assert_allclose(
        [r.logOdds for r in rows], direct, atol=1e-5)


def test_regression_bonferroni_rule():
    gen = np.random.default_rng(8)
    n = 800
    g = gen.choice(['a', 'b', 'c', 'd'], n)
    y = (gen.random(n) < np.where(g == 'd', 0.8, 0.5)).astype(int)
    rows = factorRegression([{'g': v} for v in g], y, ['g'])
    for row in rows[1:]:
        assert row.groupSize == 3
        assert row.significantBonferroni == (row.pValue < 0.05 / 3)


def test_regression_drops_empty_level(caplog):
    design, y = _rows([('a', 1), ('a', 0), ('b', 1), ('b', 0), ('b', 1)])
    with caplog.at_level(logging.WARNING, logger='derm_shift.evaluate'):
        rows = factorRegression(design, y, ['g'], {'g': ['a', 'b', 'z']})
    assert [r.level for r in rows[1:]] == ['b']
    assert 'z' in caplog.text


def test_regression_undeclared_level():
    design, y = _rows([('a', 1), ('q', 0)])
    with pytest.raises(DataError):
        factorRegression(design, y, ['g'], {'g': ['a']})


def test_regression_single_outcome_class():
    design, y = _rows([('a', 1), ('b', 1)])
    with pytest.raises(DataError):
        factorRegression(design, y, ['g'])


def test_regression_separation_advisory():
    pairs = [('x', 1)] * 20 + [('ref', 1)] * 10 + [('ref', 0)] * 10
    design, y = _rows(pairs)
    rows = factorRegression(design, y, ['g'], {'g': ['ref', 'x']})
    assert rows[1].advisory
    assert np.isfinite(rows[1].logOdds)


def test_stratified_single_stratum():
    flags = np.random.default_rng(9).random(60) < 0.6
    rows = stratifiedTable(flags, {'site': ['CLIN'] * 60}, nBoot=20)
    assert len(rows) == 1
    assert rows[0].result.value == pytest.approx(flags.mean())


def test_stratified_combines_to_overall():
    gen = np.random.default_rng(10)
    flags = gen.random(100) < 0.6
    w = gen.uniform(1, 5, 100)
    sex = np.where(gen.random(100) < 0.5, 'female', 'male')
    rows = stratifiedTable(flags, {'sex': sex}, w, nBoot=20)
    total = sum(w[sex == r.level].sum() * r.result.value for r in rows)
    assert total / w.sum() == pytest.approx(metricResult(flags, w, 20).value)


def test_stratified_empty_level():
    rows = stratifiedTable([1, 0], {'efst': ['I/II', 'I/II']},
        levels={'efst': ['I/II', 'V/VI']}, nBoot=20)
    empty = rows[1]
    assert empty.level == 'V/VI'
    assert empty.result.n == 0 and math.isnan(empty.result.value)


def test_metrics_csv(tmp_path):
    path = tmp_path / 'metrics.csv'
    writeMetricsCsv([MetricRow('top1', 'all', 0.5, 0.4, 0.6, 100, False)],
        path)
    df = pd.read_csv(path)
    assert list(df.columns) == list(MetricRow._fields)
    assert df.value[0] == 0.5
    writeMetricsCsv([], path)
    assert list(pd.read_csv(path).columns) == list(MetricRow._fields)


def test_regression_csv(tmp_path):
    design, y = _rows([('a', 1), ('a', 0), ('b', 1), ('b', 0), ('b', 1)])
    rows = factorRegression(design, y, ['g'])
    path = tmp_path / 'regression.csv'
    writeRegressionCsv(rows, path, ['AI'] * len(rows))
    df = pd.read_csv(path)
    assert list(df.columns[:3]) == ['subject', 'factor', 'level']
    assert 'significant_bonferroni' in df.columns


def test_accuracy_falls_with_panel_ambiguity():
    config = GeneratorConfig(dim=16, nDev=4000, nSite=1, seed=5)
    tax = defaultTaxonomy(config.numConditions, config.numCategories)
    dev, _ = generateSyntheticSites(config, tax)
    probs = imagePosterior(SiteModel(config, tax), dev)
    refs = dev.references()
    flags = topkFlags(probs, [r.top1 for r in refs], 3)
    rows = stratifiedTable(
        flags, {'ambiguity': [r.ambiguity for r in refs]},
        levels={'ambiguity': ReferenceLabel.AmbiguityClasses}, nBoot=20)
    acc = {row.level: row.result.value for row in rows}
    assert acc['Unanimous'] >= acc['Intermediate'] >= acc['Ambiguous']
