"""
Per-category temperature scaling of classifier logits and measures
of calibration quality.
"""

import json
import logging
import math
from collections import namedtuple

import numpy as np
from scipy.special import logsumexp, softmax, log_softmax

from derm_shift.objects import Object
from derm_shift.errors import ConfigError, DataError, EmptyInputError
from derm_shift.taxonomy import ConditionTaxonomy

__all__ = (
    'CalibrationParams ReliabilityBin recalibrate fitTemperatures '
    'categoryNll expectedCalibrationError maxCalibrationError '
    'reliabilityCurve saveCalibration loadCalibration').split()

_logger = logging.getLogger('derm_shift.calibrate')

LOG_T_RANGE = (-3.0, 3.0)
LOG_T_TOL = 1e-6

ReliabilityBin = namedtuple('ReliabilityBin',
    'lo hi confidence accuracy fraction count')


class CalibrationParams(Object):
    """
    One positive temperature per condition category.
    ``fitStats`` holds the per-category one-vs-rest NLL before and
    after fitting.
    """
    defaults = {
        'temperatures': None,
        'fitStats': None}
    __slots__ = defaults.keys()

    def __init__(self, temperatures, fitStats=None):
        Object.__init__(self, np.asarray(temperatures, float), fitStats)
        self.validate()

    @classmethod
    def identity(cls, numCategories) -> 'CalibrationParams':
        return cls(np.ones(numCategories))

    def validate(self):
        t = self.temperatures
        if t.ndim != 1 or not np.all(np.isfinite(t)) or not np.all(t > 0):
            raise ConfigError(f'Temperatures must be positive: {t}')
        return self


def recalibrate(logits, params: CalibrationParams,
        taxonomy: ConditionTaxonomy) -> np.ndarray:
    """
    Softmax over all conditions after dividing every logit by the
    temperature of its condition's category. Accepts a single logit
    vector or a batch.

    Logits are first shifted to log-probabilities, which makes the
    result independent of any constant added to the logits.
    """
    params.validate()
    T = params.temperatures[taxonomy.categoryIndex]
    return softmax(log_softmax(np.asarray(logits, float), axis=-1) / T,
        axis=-1)


def categoryNll(logits, labels, members, T: float, nonMembers=None) -> float:
    """
    One-vs-rest NLL of a category at temperature ``T`` on its member
    log-probabilities. Cases of the category score the log-probability
    of their true condition; other cases score the log of the
    non-member mass.
    """
    z = log_softmax(np.asarray(logits, float), axis=1)
    z[:, members] /= T
    logp = log_softmax(z, axis=1)
    isMember = np.isin(labels, members)
    nll = -logp[isMember, labels[isMember]].sum()
    if (~isMember).any():
        if nonMembers is None:
            nonMembers = np.setdiff1d(np.arange(z.shape[1]), members)
        nll -= logsumexp(logp[~isMember][:, nonMembers], axis=1).sum()
    return float(nll / len(z))


def _goldenSection(f, lo, hi, iterations):
    # scipy's golden search wants a bracketing triple and may leave
    # [lo, hi]; log T has to stay inside its fixed range
    invPhi = (math.sqrt(5) - 1) / 2
    c = hi - invPhi * (hi - lo)
    d = lo + invPhi * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iterations):
        if hi - lo < LOG_T_TOL:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invPhi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invPhi * (hi - lo)
            fd = f(d)
    return (lo + hi) / 2


def fitTemperatures(
        calibLogits, calibLabels, taxonomy: ConditionTaxonomy,
        iterations: int = 60, minCases: int = 1) -> CalibrationParams:
    """
    Fit every category temperature independently by golden-section
    search on ``log T`` in [-3, 3]. Categories without calibration
    cases keep ``T = 1``; categories with fewer than ``minCases``
    cases share one global temperature fitted on all cases.
    """
    Z = np.asarray(calibLogits, float)
    y = np.asarray(calibLabels, int)
    if not len(Z):
        raise EmptyInputError('Calibration set is empty')
    K = taxonomy.numCategories
    temps = np.ones(K)
    before = [None] * K
    after = [None] * K
    present = np.bincount(taxonomy.categoryIndex[y], minlength=K)
    sparse = (present > 0) & (present < minCases)
    globalLogT = None
    if sparse.any():
        allConditions = np.arange(taxonomy.numConditions)
        globalLogT = _goldenSection(
            lambda logT: categoryNll(Z, y, allConditions, math.exp(logT)),
            *LOG_T_RANGE, iterations)
        _logger.info(
            f'{sparse.sum()} categories with fewer than {minCases} cases '
            f'use the global temperature {math.exp(globalLogT):.3f}')
    for k in range(K):
        if not present[k]:
            _logger.info(
                f'Category {taxonomy.categoryNames[k]!r} absent from '
                'calibration set, keeping T=1')
            continue
        members = taxonomy.members(k)
        nonMembers = np.flatnonzero(taxonomy.categoryIndex != k)

        def objective(logT):
            return categoryNll(Z, y, members, math.exp(logT), nonMembers)

        logT = globalLogT if sparse[k] else \
            _goldenSection(objective, *LOG_T_RANGE, iterations)
        temps[k] = math.exp(logT)
        before[k] = objective(0.0)
        after[k] = objective(logT)
    _logger.info(
        'Fitted temperatures ' + ', '.join(f'{t:.3f}' for t in temps))
    return CalibrationParams(
        temps, {'nll_before': before, 'nll_after': after})


def _binned(probs, labels, bins, weights):
    if bins < 1:
        raise ConfigError(f'Need at least one bin, got {bins}')
    P = np.asarray(probs, float)
    y = np.asarray(labels, int)
    if not len(P):
        raise EmptyInputError('No predictions to calibrate')
    if len(P) != len(y):
        raise ConfigError('Predictions and labels differ in length')
    w = np.ones(len(P)) if weights is None else np.asarray(weights, float)
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == y).astype(float)
    # right-closed bins, confidence 0 falls in the first bin
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    mass = np.bincount(idx, weights=w, minlength=bins)
    confSum = np.bincount(idx, weights=w * conf, minlength=bins)
    accSum = np.bincount(idx, weights=w * correct, minlength=bins)
    count = np.bincount(idx, minlength=bins)
    return mass, confSum, accSum, count


def expectedCalibrationError(probs, labels, bins: int = 10,
        weights=None) -> float:
    """
    Bin-mass weighted mean of ``|accuracy - confidence|`` over
    equal-width confidence bins of the top-1 prediction.
    """
    mass, confSum, accSum, _ = _binned(probs, labels, bins, weights)
    nz = mass > 0
    gaps = np.abs(accSum[nz] - confSum[nz]) / mass[nz]
    return float((mass[nz] * gaps).sum() / mass.sum())


def maxCalibrationError(probs, labels, bins: int = 10, weights=None) -> float:
    mass, confSum, accSum, _ = _binned(probs, labels, bins, weights)
    nz = mass > 0
    return float((np.abs(accSum[nz] - confSum[nz]) / mass[nz]).max())


def reliabilityCurve(probs, labels, bins: int = 10, weights=None):
    """
    List of :class:`ReliabilityBin` rows, empty bins included with
    NaN confidence and accuracy.
    """
    mass, confSum, accSum, count = _binned(probs, labels, bins, weights)
    total = mass.sum()
    rows = []
    for b in range(bins):
        m = mass[b]
        rows.append(ReliabilityBin(
            b / bins, (b + 1) / bins,
            confSum[b] / m if m else math.nan,
            accSum[b] / m if m else math.nan,
            m / total, int(count[b])))
    return rows


def saveCalibration(params: CalibrationParams, path, taxonomy):
    doc = {
        'temperatures': params.temperatures.tolist(),
        'taxonomy_hash': taxonomy.hash,
        'fit_stats': params.fitStats or {}}
    with open(path, 'w') as f:
        json.dump(doc, f, indent=1)


def loadCalibration(path, taxonomy) -> CalibrationParams:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f'Calibration file {path} does not parse: {e}')
    if doc.get('taxonomy_hash') != taxonomy.hash:
        raise DataError('Calibration was fitted on a different taxonomy')
    temps = doc.get('temperatures')
    if temps is None or len(temps) != taxonomy.numCategories:
        raise DataError(
            f'Calibration needs {taxonomy.numCategories} temperatures')
    return CalibrationParams(temps, doc.get('fit_stats'))
