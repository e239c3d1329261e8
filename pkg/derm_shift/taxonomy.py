import json
from collections import namedtuple
from typing import Optional

import numpy as np

from derm_shift.objects import Object
from derm_shift.errors import SchemaError, InvalidIdError
import derm_shift.util as util

__all__ = (
    'Condition ConditionTaxonomy defaultTaxonomy syntheticTaxonomy '
    'loadTaxonomy saveTaxonomy').split()


Condition = namedtuple('Condition',
    'conditionId name categoryId highRisk synonyms')


def _normalize(name: str) -> str:
    return name.strip().casefold()


class ConditionTaxonomy(Object):
    """
    The universe of conditions and their grouping into categories.

    Immutable after construction; all invariants are checked up front:

    * condition ids are exactly 0..C-1;
    * every category has at least one condition;
    * names and synonyms are unique after case-folding.
    """
    defaults = {
        'conditions': (),
        'categoryNames': ()}
    __slots__ = list(defaults.keys()) + \
            ['_lookup', '_categoryIndex', '_hash']

    def __init__(self, conditions, categoryNames):
        Object.__init__(self, tuple(conditions), tuple(categoryNames))
        conds = sorted(self.conditions, key=lambda c: c.conditionId)
        if [c.conditionId for c in conds] != list(range(len(conds))):
            raise SchemaError('Condition ids must be exactly 0..C-1')
        if not conds:
            raise SchemaError('Taxonomy has no conditions')
        self.conditions = tuple(conds)
        K = len(self.categoryNames)
        counts = np.zeros(K, int)
        for c in conds:
            if not 0 <= c.categoryId < K:
                raise SchemaError(
                    f'Condition {c.name!r} has unknown category {c.categoryId}')
            counts[c.categoryId] += 1
        empty = [self.categoryNames[k] for k in np.flatnonzero(counts == 0)]
        if empty:
            raise SchemaError(f'Categories without conditions: {empty}')
        self._lookup = {}
        for c in conds:
            for s in (c.name,) + tuple(c.synonyms):
                key = _normalize(s)
                if key in self._lookup:
                    raise SchemaError(f'Duplicate name or synonym {s!r}')
                self._lookup[key] = c.conditionId
        self._categoryIndex = np.array([c.categoryId for c in conds])
        self._categoryIndex.flags.writeable = False
        self._hash = util.sha256(self.document())

    def __repr__(self):
        return (f'{self.__class__.__name__}(C={self.numConditions}, '
                f'K={self.numCategories}, hash={self._hash[:12]})')

    __str__ = __repr__

    @property
    def numConditions(self) -> int:
        return len(self.conditions)

    @property
    def numCategories(self) -> int:
        return len(self.categoryNames)

    @property
    def hash(self) -> str:
        """
        SHA-256 of the canonical taxonomy document.
        """
        return self._hash

    @property
    def categoryIndex(self) -> np.ndarray:
        """
        Read-only array mapping condition id to category id.
        """
        return self._categoryIndex

    def highRiskMask(self) -> np.ndarray:
        return np.array([c.highRisk for c in self.conditions], bool)

    def members(self, categoryId: int) -> np.ndarray:
        return np.flatnonzero(self._categoryIndex == categoryId)

    def name(self, conditionId: int) -> str:
        self._checkId(conditionId)
        return self.conditions[conditionId].name

    def mapDiagnosis(self, rawName: str) -> Optional[int]:
        """
        Map a free-text diagnosis to a condition id by exact match on
        names and synonyms after case-folding and trimming.
        Returns None when nothing matches.
        """
        return self._lookup.get(_normalize(rawName))

    def categoryOf(self, conditionId: int) -> int:
        """
        The category id of the given condition.
        """
        self._checkId(conditionId)
        return int(self._categoryIndex[conditionId])

    def _checkId(self, conditionId):
        if not 0 <= conditionId < self.numConditions:
            raise InvalidIdError(
                f'Condition id {conditionId} not in '
                f'0..{self.numConditions - 1}')

    def document(self) -> dict:
        return {
            'categories': list(self.categoryNames),
            'conditions': [{
                'id': c.conditionId,
                'name': c.name,
                'category': self.categoryNames[c.categoryId],
                'high_risk': bool(c.highRisk),
                'synonyms': list(c.synonyms)} for c in self.conditions]}


def loadTaxonomy(path) -> ConditionTaxonomy:
    """
    Load a taxonomy from its JSON document.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f'Taxonomy file {path} does not parse: {e}')
    return fromDocument(doc)


def fromDocument(doc) -> ConditionTaxonomy:
    try:
        categories = list(doc['categories'])
        catIds = {name: i for i, name in enumerate(categories)}
        conditions = []
        for c in doc['conditions']:
            cat = c['category']
            catId = cat if isinstance(cat, int) else catIds.get(cat, -1)
            conditions.append(Condition(
                int(c['id']), c['name'], catId,
                bool(c.get('high_risk', False)),
                tuple(c.get('synonyms', ()))))
    except (KeyError, TypeError) as e:
        raise SchemaError(f'Malformed taxonomy document: {e!r}')
    return ConditionTaxonomy(conditions, categories)


def saveTaxonomy(taxonomy: ConditionTaxonomy, path):
    with open(path, 'w') as f:
        json.dump(taxonomy.document(), f, indent=1)


_DEFAULT = [
    ('Contact dermatitis', [
        ('Allergic Contact Dermatitis', False, ['ACD']),
        ('Irritant Contact Dermatitis', False, ['ICD'])]),
    ('Cutaneous Infections', [
        ('Impetigo', False, []),
        ('Cellulitis', False, []),
        ('Tinea', False, ['Dermatophytosis', 'Ringworm']),
        ('Herpes Zoster', False, ['Shingles']),
        ('Molluscum Contagiosum', False, ['Molluscum']),
        ('Scabies', False, []),
        ('Tinea Versicolor', False, ['Pityriasis versicolor'])]),
    ('Inflammatory Eruptions', [
        ('Eczema', False, ['Atopic dermatitis', 'Atopic eczema']),
        ('Psoriasis', False, ['Plaque psoriasis']),
        ('Acne', False, ['Acne vulgaris']),
        ('Rosacea', False, []),
        ('Seborrheic Dermatitis', False, ['Seborrhea']),
        ('Folliculitis', False, []),
        ('Lichen planus/lichenoid eruption', False, ['Lichen planus'])]),
    ('Other Eruptions', [
        ('Drug Rash', False, ['Drug eruption']),
        ('Urticaria', False, ['Hives']),
        ('Pityriasis rosea', False, []),
        ('Stasis Dermatitis', False, ['Venous eczema'])]),
    ('Neoplasms', [
        ('SK/ISK', False, ['Seborrheic keratosis',
                           'Irritated seborrheic keratosis']),
        ('Melanocytic Nevus', False, ['Nevus', 'Mole']),
        ('Cyst', False, ['Epidermoid cyst']),
        ('Verruca vulgaris', False, ['Common wart', 'Wart']),
        ('Actinic Keratosis', True, ['Solar keratosis']),
        ('SCC/SCCIS', True, ['Squamous cell carcinoma']),
        ('Basal Cell Carcinoma', True, ['BCC']),
        ('Melanoma', True, ['Malignant melanoma'])]),
    ('Blisters and Ulcers', [
        ('Bullous Pemphigoid', False, []),
        ('Ulcer', False, ['Skin ulcer'])]),
    ('Nail disorders', [
        ('Onychomycosis', False, ['Nail fungus'])]),
    ('Hair Disorders', [
        ('Androgenetic Alopecia', False, ['Pattern hair loss']),
        ('Alopecia Areata', False, [])]),
    ('Pigmentary Disorders', [
        ('Vitiligo', False, []),
        ('Melasma', False, ['Chloasma']),
        ('Post-Inflammatory hyperpigmentation', False, ['PIH'])]),
    ('Vascular', [
        ('Hemangioma', False, []),
        ('Leukocytoclastic Vasculitis', False, ['LCV'])]),
    ('Others', [
        ('Ecchymoses', False, ['Bruise'])]),
    ('Healthy', [
        ('Healthy', False, ['Normal skin'])]),
]


def defaultTaxonomy(numConditions=40, numCategories=12) -> ConditionTaxonomy:
    """
    The desk-scale taxonomy: 40 conditions in 12 categories named
    after the standard dermatology groupings. Other sizes fall back
    to :func:`syntheticTaxonomy`.
    """
    if (numConditions, numCategories) != (40, 12):
        return syntheticTaxonomy(numConditions, numCategories)
    conditions = []
    categories = []
    for catId, (catName, conds) in enumerate(_DEFAULT):
        categories.append(catName)
        for name, highRisk, synonyms in conds:
            conditions.append(Condition(
                len(conditions), name, catId, highRisk, tuple(synonyms)))
    return ConditionTaxonomy(conditions, categories)


def syntheticTaxonomy(numConditions, numCategories) -> ConditionTaxonomy:
    """
    Taxonomy with generated names. Conditions are dealt round-robin
    over the categories; every tenth condition is high-risk.
    """
    assert 1 <= numCategories <= numConditions
    categories = [f'Category {k:02d}' for k in range(numCategories)]
    conditions = [
        Condition(i, f'Condition {i:03d}', i % numCategories,
            i % 10 == 0, (f'C{i:03d}',))
        for i in range(numConditions)]
    return ConditionTaxonomy(conditions, categories)
