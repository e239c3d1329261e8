import numpy as np
import pandas as pd
import pytest

from derm_shift.objects import AugmentConfig, GeneratorConfig
from derm_shift.generator import generateSyntheticSites
from derm_shift.adapt import (
    mhResample, conditionAwareAugment, randomAugment, stratifiedSplit,
    lessCommonConditions, splitKey)
from derm_shift.dataio import (
    ConditionDistribution, conditionDistribution, Dataset)
from derm_shift.taxonomy import syntheticTaxonomy
from derm_shift.errors import ConfigError, UnsupportedTargetError

from conftest import makeCase, makeDataset


@pytest.fixture
def tax2():
    return syntheticTaxonomy(2, 2)


@pytest.mark.parametrize('seed', [1, 2, 3])
def test_mh_matches_target(tax2, seed):
    source = makeDataset([0] * 900 + [1] * 100, tax2)
    target = ConditionDistribution('category', np.array([0.5, 0.5]))
    out = mhResample(source, target, 100000, seed)
    assert len(out) == 100000
    assert conditionDistribution(out, 'category').tv(target) <= 0.02


def test_mh_identity_target(smallSites):
    dev, _ = smallSites
    target = conditionDistribution(dev, 'category')
    out = mhResample(dev, target, 10000, seed=4)
    assert conditionDistribution(out, 'category').tv(target) <= 0.03


def test_mh_repeats_get_unique_ids(tax2):
    source = makeDataset([0, 1, 1], tax2)
    target = ConditionDistribution('condition', np.array([0.5, 0.5]))
    out = mhResample(source, target, 50, seed=0, burnIn=10)
    assert len(set(out.caseIds)) == 50
    assert all(i.split('#')[0] in source.caseIds for i in out.caseIds)


def test_mh_zero_output(tax2):
    source = makeDataset([0, 1], tax2)
    target = ConditionDistribution('category', np.array([0.5, 0.5]))
    assert len(mhResample(source, target, 0, seed=0)) == 0


def test_mh_unsupported_target(tax2):
    source = makeDataset([0, 0, 0], tax2)
    target = ConditionDistribution('category', np.array([0.5, 0.5]))
    with pytest.raises(UnsupportedTargetError):
        mhResample(source, target, 10, seed=0)


def test_mh_deterministic(tax2):
    source = makeDataset([0] * 30 + [1] * 10, tax2)
    target = ConditionDistribution('category', np.array([0.3, 0.7]))
    a = mhResample(source, target, 500, seed=9)
    b = mhResample(source, target, 500, seed=9)
    assert a.caseIds == b.caseIds


def _pools(tax2, nDev=100, nM=1000, nL=1000):
    dev = makeDataset([0] * nDev, tax2, prefix='d')
    pool = makeDataset([0] * nM + [1] * nL, tax2, prefix='p')
    return dev, pool


def test_less_common(tax2):
    dev, pool = _pools(tax2)
    np.testing.assert_array_equal(
        lessCommonConditions(dev, pool), [False, True])


def test_augment_alpha_one_draws_from_less_common(tax2):
    dev, pool = _pools(tax2)
    out = conditionAwareAugment(dev, pool, AugmentConfig(alpha=1.0, nAdd=300))
    added = [c for c in out if c.caseId.startswith('p')]
    assert len(added) == 300
    assert all(c.trueCondition == 1 for c in added)


def test_augment_nothing(tax2):
    dev, pool = _pools(tax2)
    assert conditionAwareAugment(dev, pool, AugmentConfig(nAdd=0)) == dev


def test_augment_mix(tax2):
    dev, pool = _pools(tax2)
    out = conditionAwareAugment(
        dev, pool, AugmentConfig(alpha=0.7, nAdd=1000, seed=5))
    added = [c for c in out if c.caseId.startswith('p')]
    assert len(added) == len({c.caseId for c in added}) == 1000
    numL = sum(c.trueCondition == 1 for c in added)
    assert abs(numL - 700) <= 3 * np.sqrt(1000 * 0.7 * 0.3)


def test_augment_exhausted_pool_defers(tax2):
    dev, pool = _pools(tax2, nL=10)
    out = conditionAwareAugment(dev, pool, AugmentConfig(alpha=1.0, nAdd=50))
    added = [c for c in out if c.caseId.startswith('p')]
    assert sum(c.trueCondition == 1 for c in added) == 10
    assert len(added) == 50


def test_augment_default_size(tax2):
    dev, pool = _pools(tax2, nM=5, nL=6)
    out = conditionAwareAugment(dev, pool, AugmentConfig(poolFraction=0.5))
    assert len(out) == len(dev) + 6


def test_augment_too_many(tax2):
    dev, pool = _pools(tax2, nM=5, nL=5)
    with pytest.raises(ConfigError):
        conditionAwareAugment(dev, pool, AugmentConfig(nAdd=11))
    with pytest.raises(ConfigError):
        randomAugment(dev, pool, 11, seed=0)


def test_random_augment(tax2):
    dev, pool = _pools(tax2)
    out = randomAugment(dev, pool, 200, seed=3)
    assert len(out) == 300
    assert randomAugment(dev, pool, 0, seed=3) == dev


def test_split_single_stratum(tax2):
    site = makeDataset([1] * 100, tax2)
    calib, ev = stratifiedSplit(site, 0.2, seed=0)
    assert (len(calib), len(ev)) == (20, 80)


def test_split_partition(smallSites):
    _, site = smallSites
    calib, ev = stratifiedSplit(site, 0.2, seed=1)
    assert sorted(calib.caseIds + ev.caseIds) == sorted(site.caseIds)
    assert not set(calib.caseIds) & set(ev.caseIds)


def test_split_per_stratum_counts(smallSites):
    _, site = smallSites
    calib, _ = stratifiedSplit(site, 0.2, seed=1)
    calibIds = set(calib.caseIds)
    strata = {}
    for i, case in enumerate(site):
        key = splitKey(site, i)
        n, m = strata.get(key, (0, 0))
        strata[key] = (n + (case.caseId in calibIds), m + 1)
    for n, m in strata.values():
        assert abs(n - round(0.2 * m)) <= 1
    perCondition = np.bincount(calib.top1(), minlength=40)
    sizes = np.bincount(site.top1(), minlength=40)
    assert np.all(np.abs(perCondition - 0.2 * sizes) < 1)


@pytest.mark.parametrize('frac', [0.2, 0.35, 0.5])
def test_split_total_follows_fraction(smallSites, frac):
    _, site = smallSites
    calib, ev = stratifiedSplit(site, frac, seed=2)
    assert abs(len(calib) - frac * len(site)) <= 1
    assert len(calib) + len(ev) == len(site)


def test_split_small_remainder_goes_to_eval(tax2):
    cases = [makeCase(f'c{i}', 0, tax2) for i in range(5)]
    cases.append(makeCase('lonely', 1, tax2, sex='male'))
    calib, ev = stratifiedSplit(Dataset(cases, tax2), 0.2, seed=0)
    assert 'lonely' in ev.caseIds
    assert len(calib) == 1


def test_split_singletons_share_remainder_seats(tax2):
    # ten singleton strata at 20%: two of them go to calibration
    cases = [makeCase(f'c{i}', i % 2, tax2, age=20.0 + 10 * (i // 2))
        for i in range(10)]
    calib, ev = stratifiedSplit(Dataset(cases, tax2), 0.2, seed=4)
    assert (len(calib), len(ev)) == (2, 8)


def _tv(a, b):
    p = pd.Series(a).value_counts(normalize=True)
    q = pd.Series(b).value_counts(normalize=True)
    return 0.5 * p.sub(q, fill_value=0).abs().sum()


def test_split_keeps_marginals(taxonomy):
    config = GeneratorConfig(dim=8, nDev=1, nSite=1000, maxImages=2, seed=11)
    _, site = generateSyntheticSites(config, taxonomy)
    calib, ev = stratifiedSplit(site, 0.2, seed=11)
    assert len(calib) == 200
    assert conditionDistribution(calib).tv(conditionDistribution(ev)) <= 0.1
    for field in ('sex', 'ageGroup', 'efst'):
        assert _tv(
            [getattr(c.demographics, field) for c in calib],
            [getattr(c.demographics, field) for c in ev]) <= 0.1


def test_split_deterministic(smallSites):
    _, site = smallSites
    assert stratifiedSplit(site, 0.2, 6)[0].caseIds == \
        stratifiedSplit(site, 0.2, 6)[0].caseIds


@pytest.mark.parametrize('frac', [0.0, 1.0, -0.5])
def test_split_bad_fraction(tax2, frac):
    with pytest.raises(ConfigError):
        stratifiedSplit(makeDataset([0, 1], tax2), frac)
