"""
Dataset-level interventions against label shift: Metropolis-Hastings
resampling towards a target distribution, condition-aware and random
augmentation with site cases, and the stratified calibration split.
"""

import logging
import math
from collections import defaultdict
from typing import Tuple

import numpy as np

from derm_shift.objects import AugmentConfig
from derm_shift.errors import (
    ConfigError, EmptyInputError, UnsupportedTargetError)
from derm_shift.dataio import (
    Dataset, ConditionDistribution, conditionDistribution)
import derm_shift.util as util

__all__ = (
    'mhResample conditionAwareAugment randomAugment stratifiedSplit '
    'lessCommonConditions splitKey').split()

_logger = logging.getLogger('derm_shift.adapt')


def _labels(dataset: Dataset, level: str) -> np.ndarray:
    if level == 'category':
        return dataset.categories()
    elif level == 'condition':
        return dataset.top1()
    raise ConfigError(f'Unknown level {level!r}')


def mhResample(
        source: Dataset, target: ConditionDistribution, nOut: int,
        seed, burnIn: int = 1000) -> Dataset:
    """
    Draw ``nOut`` cases from ``source`` with a Metropolis-Hastings chain
    whose stationary distribution over labels is ``target``.

    The proposal is a uniformly drawn source case, accepted with
    probability ``min(1, w(proposed) / w(current))`` where
    ``w = target(label) / source(label)``. After the burn-in the chain
    state is emitted after every proposal, so cases can repeat; repeats
    get the suffix ``#n`` on their case id.
    """
    if nOut < 0 or burnIn < 0:
        raise ConfigError('nOut and burnIn must be >= 0')
    if nOut == 0:
        return Dataset((), source.taxonomy, validate=False)
    if not len(source):
        raise EmptyInputError('Cannot resample an empty dataset')
    labels = _labels(source, target.level)
    tgt = np.asarray(target.probs, float)
    srcMass = np.bincount(labels, minlength=len(tgt)) / len(labels)
    missing = np.flatnonzero((tgt > 0) & (srcMass == 0))
    if len(missing):
        raise UnsupportedTargetError(
            f'Target puts mass on {target.level} ids {missing.tolist()} '
            'that are absent from the source')
    ratio = np.divide(tgt, srcMass, out=np.zeros_like(tgt), where=srcMass > 0)
    w = ratio[labels]

    gen = util.rng(seed, 'mh')
    N = len(source)
    total = burnIn + nOut
    proposals = gen.integers(0, N, total)
    uniforms = gen.random(total)
    current = int(gen.choice(np.flatnonzero(w > 0)))
    chain = np.empty(nOut, int)
    accepted = 0
    for i in range(total):
        j = proposals[i]
        if uniforms[i] * w[current] < w[j]:
            current = j
            accepted += 1
        if i >= burnIn:
            chain[i - burnIn] = current

    seen = defaultdict(int)
    cases = []
    for i in chain:
        case = source.cases[i]
        n = seen[case.caseId]
        seen[case.caseId] += 1
        cases.append(case if not n else case.copy(caseId=f'{case.caseId}#{n}'))
    out = Dataset(cases, source.taxonomy, validate=False)
    if source._refs is not None:
        out._refs = [source._refs[i] for i in chain]
    _logger.info(
        f'MH resampled {nOut} cases from {N}, '
        f'acceptance {accepted / total:.3f}, {len(seen)} distinct')
    return out


def lessCommonConditions(
        dev: Dataset, sitePool: Dataset, level='condition') -> np.ndarray:
    """
    Boolean mask of labels with more mass at the site than in DEV.
    """
    pSite = conditionDistribution(sitePool, level).probs
    pDev = conditionDistribution(dev, level).probs if len(dev) \
        else np.zeros_like(pSite)
    return pSite > pDev


def _numToAdd(config: AugmentConfig, poolSize):
    nAdd = config.nAdd if config.nAdd is not None \
        else math.floor(config.poolFraction * poolSize + 0.5)
    if nAdd > poolSize:
        raise ConfigError(f'Cannot add {nAdd} cases from a pool of {poolSize}')
    return nAdd


def conditionAwareAugment(
        dev: Dataset, sitePool: Dataset, config: AugmentConfig) -> Dataset:
    """
    DEV plus ``nAdd`` site cases. Each draw picks the pool of conditions
    that are less common in DEV with probability ``alpha`` (else the
    pool of the remaining conditions) and takes a uniformly drawn,
    not yet used case from it; an exhausted pool defers to the other.
    """
    config.validate()
    if not len(sitePool):
        raise EmptyInputError('Site pool is empty')
    nAdd = _numToAdd(config, len(sitePool))
    if nAdd == 0:
        return dev
    less = lessCommonConditions(dev, sitePool, config.level)
    inL = less[_labels(sitePool, config.level)]
    gen = util.rng(config.seed, 'augment')
    pools = [
        list(gen.permutation(np.flatnonzero(inL))),
        list(gen.permutation(np.flatnonzero(~inL)))]
    coins = gen.random(nAdd)
    drawn = []
    for u in coins:
        which = 0 if u < config.alpha else 1
        if not pools[which]:
            which = 1 - which
        drawn.append(int(pools[which].pop()))
    numL = int(inL[drawn].sum())
    _logger.info(
        f'Condition-aware augmentation: {nAdd} site cases added, '
        f'{numL} from less common conditions')
    return dev.union(sitePool.subset(sorted(drawn)))


def randomAugment(dev: Dataset, sitePool: Dataset, nAdd: int, seed) -> Dataset:
    """
    DEV plus ``nAdd`` site cases drawn uniformly without replacement.
    """
    if nAdd > len(sitePool):
        raise ConfigError(
            f'Cannot add {nAdd} cases from a pool of {len(sitePool)}')
    if nAdd <= 0:
        return dev
    gen = util.rng(seed, 'randomAugment')
    drawn = gen.choice(len(sitePool), nAdd, replace=False)
    return dev.union(sitePool.subset(sorted(drawn)))


def splitKey(dataset: Dataset, i: int):
    """
    Stratum of a case: top-1 reference x sex x age group x eFST band.
    """
    case = dataset.cases[i]
    demo = case.demographics
    return (int(dataset.references()[i].top1),
        demo.sex, demo.ageGroup, demo.efst)


def _apportion(sizes, frac, total, gen) -> np.ndarray:
    """
    Largest-remainder allocation of ``total`` seats over groups with
    quotas ``frac * size``; equal remainders are served in seeded
    random order.
    """
    quota = frac * np.asarray(sizes, float)
    counts = np.floor(quota).astype(int)
    order = np.lexsort((gen.random(len(counts)), counts - quota))
    counts[order[:total - int(counts.sum())]] += 1
    return counts


def stratifiedSplit(
        site: Dataset, frac: float = 0.2,
        seed=0) -> Tuple[Dataset, Dataset]:
    """
    Split into a calibration part and an evaluation part.

    Calibration gets ``round(frac * N)`` cases. The seats are first
    apportioned over the top-1 conditions and then, within every
    condition, over its demographic strata, both by largest remainder.
    Every condition and every stratum of ``m`` cases ends up within
    one case of ``round(frac * m)``; a singleton stratum goes to
    evaluation unless it wins a remainder seat.
    """
    if not 0 < frac < 1:
        raise ConfigError(f'Split fraction {frac} not in (0, 1)')
    strata = defaultdict(list)
    for i in range(len(site)):
        strata[splitKey(site, i)].append(i)
    byCondition = defaultdict(list)
    for key in sorted(strata):
        byCondition[key[0]].append(key)
    conditions = sorted(byCondition)
    gen = util.rng(seed, 'split')
    seats = _apportion(
        [sum(len(strata[key]) for key in byCondition[c]) for c in conditions],
        frac, math.floor(frac * len(site) + 0.5), gen)
    calib = []
    for c, total in zip(conditions, seats):
        keys = byCondition[c]
        counts = _apportion(
            [len(strata[key]) for key in keys], frac, total, gen)
        for key, n in zip(keys, counts):
            members = strata[key]
            pick = gen.permutation(len(members))[:n]
            calib += [members[j] for j in pick]
    calib = sorted(calib)
    calibSet = set(calib)
    rest = [i for i in range(len(site)) if i not in calibSet]
    _logger.info(
        f'Stratified split: {len(calib)} calibration, {len(rest)} evaluation '
        f'over {len(strata)} strata')
    return site.subset(calib), site.subset(rest)
