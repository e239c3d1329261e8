import itertools
from collections import Counter
from typing import List, Sequence

import numpy as np

from derm_shift.objects import (
    Object, RaterDiagnosis, MappedDiagnosis, WeightedEntry)
from derm_shift.errors import UndiagnosableCaseError
from derm_shift.taxonomy import ConditionTaxonomy

__all__ = (
    'WeightedDifferential ReferenceLabel mapAndDedup rankWeights '
    'combinePanel referenceLabel').split()


class WeightedDifferential(Object):
    """
    Conditions with strictly positive weights, ordered by descending
    weight and then ascending condition id.
    """
    defaults = {
        'entries': ()}
    __slots__ = defaults.keys()

    def __init__(self, entries=()):
        entries = sorted(
            (WeightedEntry(int(c), float(w)) for c, w in entries),
            key=lambda e: (-e.weight, e.conditionId))
        assert len({e.conditionId for e in entries}) == len(entries), \
            'duplicate condition in differential'
        assert all(e.weight > 0 for e in entries), 'non-positive weight'
        Object.__init__(self, tuple(entries))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def top1(self):
        """
        Highest weighted condition id, or None for an empty differential.
        """
        return self.entries[0].conditionId if self.entries else None

    def total(self) -> float:
        return sum(e.weight for e in self.entries)

    def dense(self, numConditions: int) -> np.ndarray:
        """
        Weights as a dense vector over all conditions.
        """
        v = np.zeros(numConditions)
        for e in self.entries:
            v[e.conditionId] = e.weight
        return v


class ReferenceLabel(Object):
    """
    Panel-aggregated reference: the weighted differential, its argmax
    and the ambiguity class from the raters' top-1 agreement.
    """
    defaults = {
        'top1': -1,
        'combined': None,
        'ambiguity': ''}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    AmbiguityClasses = ('Unanimous', 'Intermediate', 'Ambiguous')


for _k in ReferenceLabel.AmbiguityClasses:
    setattr(ReferenceLabel, _k, _k)


def mapAndDedup(
        diagnoses: Sequence[RaterDiagnosis],
        taxonomy: ConditionTaxonomy) -> List[MappedDiagnosis]:
    """
    Map raw diagnosis names to conditions, dropping the unmappable ones.
    When a condition occurs more than once its highest confidence
    is retained.
    """
    best = {}
    for d in diagnoses:
        conditionId = taxonomy.mapDiagnosis(d.rawName)
        if conditionId is None:
            continue
        if d.confidence > best.get(conditionId, 0):
            best[conditionId] = d.confidence
    return sorted(
        (MappedDiagnosis(c, conf) for c, conf in best.items()),
        key=lambda m: (-m.confidence, m.conditionId))


def rankWeights(deduped: Sequence[MappedDiagnosis]) -> WeightedDifferential:
    """
    Weight every condition by the inverse of its rank. Conditions that
    share a confidence form a tie group that occupies consecutive rank
    slots (competition ranking: 1, 2, 2, 4) and shares the weight of its
    first rank equally.
    """
    ordered = sorted(deduped, key=lambda m: (-m.confidence, m.conditionId))
    entries = []
    rank = 1
    for _, group in itertools.groupby(ordered, key=lambda m: m.confidence):
        group = list(group)
        weight = 1.0 / rank / len(group)
        entries += [(m.conditionId, weight) for m in group]
        rank += len(group)
    return WeightedDifferential(entries)


def combinePanel(perRater: Sequence[WeightedDifferential]) -> ReferenceLabel:
    """
    Combine the differentials of the three panel raters by summing
    weights per condition and renormalizing to one.
    """
    assert len(perRater) == 3, 'the panel has three raters'
    summed = Counter()
    for diff in perRater:
        for e in diff:
            summed[e.conditionId] += e.weight
    if not summed:
        raise UndiagnosableCaseError('No rater produced a mappable diagnosis')
    total = sum(summed[c] for c in sorted(summed))
    combined = WeightedDifferential(
        (c, summed[c] / total) for c in sorted(summed))
    tops = [diff.top1() for diff in perRater if len(diff)]
    agreement = Counter(tops).most_common(1)[0][1]
    if agreement == 3:
        ambiguity = ReferenceLabel.Unanimous
    elif agreement == 2:
        ambiguity = ReferenceLabel.Intermediate
    else:
        ambiguity = ReferenceLabel.Ambiguous
    return ReferenceLabel(combined.top1(), combined, ambiguity)


def referenceLabel(case, taxonomy: ConditionTaxonomy) -> ReferenceLabel:
    """
    Reference label of a case from its panel of raters.
    """
    try:
        return combinePanel([
            rankWeights(mapAndDedup(rater, taxonomy))
            for rater in case.panel])
    except UndiagnosableCaseError:
        raise UndiagnosableCaseError(
            f'Case {case.caseId} has no mappable panel diagnosis')
