"""
Inference and prediction sets.
"""

import json
import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from derm_shift.objects import Object, ThresholdConfig, ScoredCondition
from derm_shift.errors import ConfigError, ShapeError, UnsupportedFitError
from derm_shift.encoder import (
    MAX_IMAGES, aggregateImages, encodeMetadata, encodeMetadataBatch)
from derm_shift.calibrate import CalibrationParams, recalibrate
from derm_shift.trainer import ModelParams
import derm_shift.util as util

__all__ = (
    'PredictionSet KThreshold predictCase datasetLogits predictDataset '
    'rankConditions variableKPredict variableKSets fitKThreshold '
    'highRiskSensitivity writePredictions').split()

_logger = logging.getLogger('derm_shift.predict')

THRESHOLD_GRID = np.round(np.arange(1, 100) / 100, 2)
CUMSUM_TOL = 1e-12


class PredictionSet(Object):
    """
    Ranked conditions, best first.
    """
    defaults = {
        'ranked': ()}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    @property
    def k(self) -> int:
        return len(self.ranked)

    def __contains__(self, conditionId):
        return any(s.conditionId == conditionId for s in self.ranked)

    def conditionIds(self) -> List[int]:
        return [s.conditionId for s in self.ranked]


class KThreshold(Object):
    """
    Cumulative-score threshold for variable-k prediction sets.
    ``advisory`` is set when no grid threshold reached the target
    sensitivity; ``sensitivity`` is the one reached on the fit set.
    """
    defaults = {
        'threshold': 0.99,
        'kMin': 3,
        'kMax': 7,
        'target': 0.95,
        'advisory': False,
        'sensitivity': float('nan')}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self, numConditions=None):
        if not 0 < self.threshold <= 1:
            raise ConfigError(f'Threshold {self.threshold} not in (0, 1]')
        if not 1 <= self.kMin <= self.kMax:
            raise ConfigError('Need 1 <= kMin <= kMax')
        if numConditions is not None and self.kMax > numConditions:
            raise ConfigError(f'kMax {self.kMax} exceeds C={numConditions}')
        return self


def _caseImages(case, seed):
    if case.numImages <= MAX_IMAGES:
        return case.imageEmbeddings.mean(axis=0)
    return aggregateImages(
        case.imageEmbeddings, util.rng(seed, 'images', case.caseId))


def _checkShapes(model: ModelParams, dim):
    if model.dim != dim:
        raise ShapeError(f'Model D={model.dim} but case has D={dim}')


def predictCase(model: ModelParams, case,
        calib: Optional[CalibrationParams] = None, rng=None,
        taxonomy=None) -> np.ndarray:
    """
    Condition probabilities of one case: aggregated images and encoded
    metadata through the FiLM layer and the classifier, followed by
    temperature scaling (plain softmax without calibration).
    """
    _checkShapes(model, case.imageEmbeddings.shape[1])
    img = aggregateImages(
        case.imageEmbeddings, rng if rng is not None else util.rng(0))
    meta = encodeMetadata(case.metadata, case.age, model.schema, case.caseId)
    z = model.logits(img[None, :], meta[None, :])[0]
    if calib is None:
        return softmax(z)
    if taxonomy is None:
        raise ConfigError('Recalibration needs the taxonomy')
    return recalibrate(z, calib, taxonomy)


def datasetLogits(model: ModelParams, dataset, seed=0,
        batchSize: int = 1024) -> np.ndarray:
    """
    Logits of every case, shape ``(N, C)``. Cases with more than six
    images draw their image subset from a stream keyed by the case id.
    """
    if not len(dataset):
        return np.empty((0, model.numConditions))
    _checkShapes(model, dataset.dim)
    out = []
    for start in range(0, len(dataset), batchSize):
        cases = dataset.cases[start:start + batchSize]
        images = np.array([_caseImages(c, seed) for c in cases])
        meta = encodeMetadataBatch(cases, model.schema)
        out.append(model.logits(images, meta))
    return np.concatenate(out)


def predictDataset(model: ModelParams, dataset,
        calib: Optional[CalibrationParams] = None, seed=0) -> np.ndarray:
    """
    Probabilities of every case, shape ``(N, C)``.
    """
    z = datasetLogits(model, dataset, seed)
    if calib is None:
        return softmax(z, axis=1)
    return recalibrate(z, calib, dataset.taxonomy)


def rankConditions(scores) -> np.ndarray:
    """
    Condition ids by descending score, ties by ascending id.
    """
    scores = np.asarray(scores, float)
    return np.lexsort((np.arange(len(scores)), -scores))


def _clampK(kStar, th, C):
    return np.clip(kStar, min(th.kMin, C), min(th.kMax, C))


def variableKPredict(scores, th: KThreshold) -> PredictionSet:
    """
    The top-k conditions where k is the smallest count whose cumulative
    score reaches the threshold, clamped to ``[kMin, kMax]``.
    """
    scores = np.asarray(scores, float)
    order = rankConditions(scores)
    cum = np.cumsum(scores[order])
    kStar = int(np.searchsorted(cum, th.threshold - CUMSUM_TOL)) + 1
    k = int(_clampK(min(kStar, len(scores)), th, len(scores)))
    return PredictionSet(tuple(
        ScoredCondition(int(c), float(scores[c])) for c in order[:k]))


def variableKSets(probs, th: KThreshold) -> List[PredictionSet]:
    return [variableKPredict(p, th) for p in probs]


def _refRanksAndCumsums(probs, refTop1):
    P = np.asarray(probs, float)
    N, C = P.shape
    ids = np.broadcast_to(np.arange(C), P.shape)
    order = np.lexsort((ids, -P), axis=1)
    ranks = np.argmax(order == np.asarray(refTop1)[:, None], axis=1) + 1
    cums = np.cumsum(np.take_along_axis(P, order, axis=1), axis=1)
    return ranks, cums


def fitKThreshold(
        devScores, devRefs, taxonomy,
        kMin: int = 3, kMax: int = 7, target: float = 0.95) -> KThreshold:
    """
    Smallest threshold on the 0.01 grid whose variable-k sets contain
    the reference top-1 of at least ``target`` of the high-risk cases.
    When no threshold gets there the result is 0.99 with ``advisory``.
    """
    ThresholdConfig(kMin=kMin, kMax=kMax, target=target).validate()
    refTop1 = np.array([r.top1 for r in devRefs], int)
    highRisk = taxonomy.highRiskMask()[refTop1]
    if not highRisk.any():
        raise UnsupportedFitError('No high-risk reference cases to fit on')
    P = np.asarray(devScores, float)[highRisk]
    ranks, cums = _refRanksAndCumsums(P, refTop1[highRisk])
    C = P.shape[1]
    th = KThreshold(kMin=kMin, kMax=kMax, target=target)
    for t in THRESHOLD_GRID:
        kStar = (cums < t - CUMSUM_TOL).sum(axis=1) + 1
        k = _clampK(np.minimum(kStar, C), th, C)
        sens = float((ranks <= k).mean())
        if sens >= target:
            _logger.info(
                f'Variable-k threshold {t:.2f} reaches sensitivity '
                f'{sens:.3f} on {len(P)} high-risk cases')
            return th.update(threshold=float(t), sensitivity=sens)
    _logger.warning(
        f'Sensitivity target {target} unreachable, '
        f'reached {sens:.3f} at 0.99')
    return th.update(threshold=0.99, advisory=True, sensitivity=sens)


def highRiskSensitivity(
        sets: Sequence[PredictionSet], refs, taxonomy) -> float:
    """
    Fraction of high-risk reference cases whose set contains the
    reference top-1; NaN without high-risk cases.
    """
    mask = taxonomy.highRiskMask()
    hits = [r.top1 in s for s, r in zip(sets, refs) if mask[r.top1]]
    return float(np.mean(hits)) if hits else float('nan')


def writePredictions(path, dataset, sets: Sequence[PredictionSet]):
    """
    JSON Lines with the case id, the scored set and its size.
    """
    with open(path, 'w') as f:
        for case, s in zip(dataset.cases, sets):
            f.write(json.dumps({
                'case_id': case.caseId,
                'scores_topk': [
                    {'condition': c.conditionId, 'score': c.score}
                    for c in s.ranked],
                'k': s.k}) + '\n')
