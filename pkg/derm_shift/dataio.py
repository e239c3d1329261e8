import json
import logging
from typing import Dict, Iterable, Optional

import numpy as np

from derm_shift.objects import (
    Object, RaterDiagnosis, Demographics, CaseAttrs)
from derm_shift.errors import (
    ConfigError, DataError, SchemaError, EmptyInputError)
from derm_shift.taxonomy import ConditionTaxonomy
from derm_shift.labels import ReferenceLabel, referenceLabel
import derm_shift.util as util

__all__ = (
    'METADATA_FIELDS Sites EfstBands AgeGroups Case Dataset '
    'ConditionDistribution loadDataset saveDataset stratifiedDownsample '
    'conditionDistribution tvDistance ageGroupOf splitDataset').split()

_logger = logging.getLogger('derm_shift.dataio')

SCHEMA_VERSION = 1

# The 25 structured metadata questions with their answer sets;
# 'unknown' is always allowed on top of these.
METADATA_FIELDS = (
    ('duration', ('days', 'weeks', 'months', 'years')),
    ('itching', ('none', 'mild', 'moderate', 'severe')),
    ('pain', ('none', 'mild', 'moderate', 'severe')),
    ('bleeding', ('no', 'yes')),
    ('growth', ('shrinking', 'stable', 'growing')),
    ('texture', ('flat', 'raised', 'rough', 'fluid_filled')),
    ('color', ('red', 'brown', 'white', 'dark')),
    ('distribution', ('single', 'few', 'many', 'widespread')),
    ('discharge', ('none', 'clear', 'pus')),
    ('scaling', ('none', 'fine', 'thick')),
    ('fever', ('no', 'yes')),
    ('fatigue', ('no', 'yes')),
    ('joint_pain', ('no', 'yes')),
    ('chills', ('no', 'yes')),
    ('mouth_sores', ('no', 'yes')),
    ('shortness_of_breath', ('no', 'yes')),
    ('sex_reported', ('female', 'male')),
    ('skin_type_reported', ('I/II', 'III/IV', 'V/VI')),
    ('smoker', ('never', 'former', 'current')),
    ('family_history', ('no', 'yes')),
    ('recent_travel', ('no', 'yes')),
    ('new_medication', ('no', 'yes')),
    ('prior_treatment', ('none', 'topical', 'oral')),
    ('sun_exposure', ('low', 'medium', 'high')),
    ('occupational_exposure', ('no', 'yes')),
)
METADATA_NAMES = tuple(name for name, _ in METADATA_FIELDS)

Sites = ('DEV', 'CLIN', 'PAT')
EfstBands = ('I/II', 'III/IV', 'V/VI', 'Unknown')
AgeGroups = ('<30', '[30,40)', '[40,50)', '[50,60)', '>=60')


def ageGroupOf(age: float) -> str:
    for bound, group in zip((30, 40, 50, 60), AgeGroups):
        if age < bound:
            return group
    return AgeGroups[-1]


class Case(Object):
    """
    One case: the frozen image embeddings (an array of shape
    ``(numImages, D)``), the metadata answers, demographics and the
    differentials of the three panel raters.

    ``trueCondition`` is the condition the generator drew, kept for
    diagnostics only; the reference label always comes from the panel.
    ``comparator`` is the differential of a site dermatologist who is
    not on the panel.
    """
    defaults = {
        'caseId': '',
        'site': 'DEV',
        'imageEmbeddings': None,
        'metadata': None,
        'age': 0.0,
        'demographics': None,
        'attrs': None,
        'panel': (),
        'stratum': '',
        'trueCondition': None,
        'comparator': ()}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    @property
    def numImages(self) -> int:
        return len(self.imageEmbeddings)

    def record(self, weight=None) -> dict:
        """
        The JSON record of this case as written to a dataset file.
        """
        d = {
            'case_id': self.caseId,
            'site': self.site,
            'image_embeddings': np.asarray(self.imageEmbeddings).tolist(),
            'metadata': dict(self.metadata),
            'age': float(self.age),
            'demographics': {
                'sex': self.demographics.sex,
                'age_group': self.demographics.ageGroup,
                'efst': self.demographics.efst},
            'attrs': {
                'anatomic_location': self.attrs.anatomicLocation,
                'year': self.attrs.year,
                'quality_flags': sorted(self.attrs.qualityFlags)},
            'panel': [[{'raw_name': d.rawName, 'confidence': d.confidence}
                for d in rater] for rater in self.panel],
            'stratum': self.stratum,
            'true_condition': self.trueCondition,
            'comparator': [{'raw_name': d.rawName, 'confidence': d.confidence}
                for d in self.comparator]}
        if weight is not None:
            d['weight'] = weight
        return d

    @classmethod
    def fromRecord(cls, d: dict) -> 'Case':
        caseId = d.get('case_id')
        try:
            demo = d['demographics']
            attrs = d['attrs']
            return cls(
                caseId=str(caseId),
                site=d['site'],
                imageEmbeddings=np.array(d['image_embeddings'], float),
                metadata=dict(d['metadata']),
                age=float(d['age']),
                demographics=Demographics(
                    demo['sex'], demo['age_group'], demo['efst']),
                attrs=CaseAttrs(
                    attrs['anatomic_location'], attrs['year'],
                    frozenset(attrs.get('quality_flags', ()))),
                panel=tuple(
                    tuple(RaterDiagnosis(x['raw_name'], int(x['confidence']))
                        for x in rater) for rater in d['panel']),
                stratum=d.get('stratum', ''),
                trueCondition=d.get('true_condition'),
                comparator=tuple(
                    RaterDiagnosis(x['raw_name'], int(x['confidence']))
                    for x in d.get('comparator', ())))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f'Malformed case record: {e!r}', caseId=caseId)


def _validateCase(case: Case, dim: int):
    emb = case.imageEmbeddings
    if emb is None or np.ndim(emb) != 2 or len(emb) < 1:
        raise SchemaError('No image embeddings', case.caseId,
            'image_embeddings')
    if emb.shape[1] != dim or dim < 1:
        raise SchemaError(
            f'Embedding dimension {emb.shape[1]} != {dim}',
            case.caseId, 'image_embeddings')
    if not np.all(np.isfinite(emb)):
        raise SchemaError('Non-finite embedding', case.caseId,
            'image_embeddings')
    metadata = case.metadata or {}
    for i, name in enumerate(METADATA_NAMES):
        if name not in metadata:
            raise SchemaError('Missing metadata field', case.caseId,
                f'{i + 1} ({name})')
    extra = set(metadata) - set(METADATA_NAMES)
    if extra:
        raise SchemaError(f'Unknown metadata fields {sorted(extra)}',
            case.caseId, 'metadata')
    if case.site not in Sites:
        raise SchemaError(f'Unknown site {case.site!r}', case.caseId, 'site')
    if case.demographics is None or case.demographics.efst not in EfstBands:
        raise SchemaError('Invalid eFST band', case.caseId, 'demographics')
    if len(case.panel) != 3:
        raise SchemaError('Panel needs 3 raters', case.caseId, 'panel')
    for d in [d for rater in case.panel for d in rater] + \
            list(case.comparator):
        if d.confidence not in (1, 2, 3, 4, 5):
            raise SchemaError(f'Confidence {d.confidence} not in 1..5',
                case.caseId, 'panel')


class Dataset:
    """
    Immutable collection of cases over one taxonomy, with optional
    inverse-probability sampling weights keyed by case id.
    Reference labels are computed on first use and cached.
    """
    __slots__ = ('cases', 'taxonomy', 'weights', '_refs', '_index')

    def __init__(self, cases: Iterable[Case], taxonomy: ConditionTaxonomy,
            weights: Optional[Dict[str, float]] = None, validate=True):
        self.cases = tuple(cases)
        self.taxonomy = taxonomy
        self.weights = dict(weights) if weights is not None else None
        self._refs = None
        self._index = {c.caseId: i for i, c in enumerate(self.cases)}
        if validate:
            self.validate()

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __getitem__(self, i):
        return self.cases[i]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and
                self.taxonomy.hash == other.taxonomy.hash and
                self.cases == other.cases and
                self.weights == other.weights)

    __hash__ = None

    def __repr__(self):
        sites = {s: sum(c.site == s for c in self.cases) for s in Sites}
        sites = ', '.join(f'{s}={n}' for s, n in sites.items() if n)
        w = ', weighted' if self.weights is not None else ''
        return f'<Dataset {len(self)} cases ({sites}){w}>'

    def validate(self):
        if len(self._index) != len(self.cases):
            seen = set()
            for c in self.cases:
                if c.caseId in seen:
                    raise SchemaError('Duplicate case id', c.caseId, 'case_id')
                seen.add(c.caseId)
        dim = self.dim
        for c in self.cases:
            _validateCase(c, dim)
        if self.weights is not None:
            for c in self.cases:
                w = self.weights.get(c.caseId)
                if w is None or not w > 0:
                    raise SchemaError(f'Weight {w} not positive',
                        c.caseId, 'weight')

    @property
    def dim(self) -> int:
        return self.cases[0].imageEmbeddings.shape[1] if self.cases else 0

    @property
    def caseIds(self):
        return [c.caseId for c in self.cases]

    def hash(self) -> str:
        """
        Identity hash over the sorted case ids.
        """
        return util.sha256(sorted(self.caseIds))

    def references(self):
        """
        List of reference labels, one per case.
        """
        if self._refs is None:
            self._refs = [referenceLabel(c, self.taxonomy) for c in self.cases]
        return self._refs

    def top1(self) -> np.ndarray:
        return np.array([r.top1 for r in self.references()], int)

    def categories(self) -> np.ndarray:
        return self.taxonomy.categoryIndex[self.top1()]

    def weightArray(self) -> np.ndarray:
        """
        Sampling weights aligned with the cases (all ones if unweighted).
        """
        if self.weights is None:
            return np.ones(len(self))
        return np.array([self.weights[c.caseId] for c in self.cases])

    def subset(self, indices) -> 'Dataset':
        """
        Dataset of the cases at the given positions, weights carried over.
        """
        cases = [self.cases[i] for i in indices]
        weights = None
        if self.weights is not None:
            weights = {c.caseId: self.weights[c.caseId] for c in cases}
        ds = Dataset(cases, self.taxonomy, weights, validate=False)
        if self._refs is not None:
            ds._refs = [self._refs[i] for i in indices]
        return ds

    def union(self, other: 'Dataset') -> 'Dataset':
        """
        Concatenation of two datasets over the same taxonomy.
        """
        assert other.taxonomy.hash == self.taxonomy.hash
        weights = None
        if self.weights is not None or other.weights is not None:
            weights = dict(zip(self.caseIds, self.weightArray()))
            weights.update(zip(other.caseIds, other.weightArray()))
        ds = Dataset(self.cases + other.cases, self.taxonomy, weights,
            validate=False)
        ds.validate()
        if self._refs is not None and other._refs is not None:
            ds._refs = self._refs + other._refs
        return ds

    def filter(self, predicate) -> 'Dataset':
        return self.subset(
            [i for i, c in enumerate(self.cases) if predicate(c)])


class ConditionDistribution(Object):
    """
    Probability vector over conditions or over categories.
    """
    defaults = {
        'level': 'condition',
        'probs': None}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    Levels = ('condition', 'category')

    def tv(self, other: 'ConditionDistribution') -> float:
        assert self.level == other.level
        return tvDistance(self.probs, other.probs)


def tvDistance(p, q) -> float:
    """
    Total-variation distance, half the L1 difference.
    """
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def conditionDistribution(
        dataset: Dataset, level: str = 'condition',
        weighted: bool = False) -> ConditionDistribution:
    """
    Normalized histogram of the top-1 reference labels (or of their
    categories), optionally using the sampling weights.
    """
    if not len(dataset):
        raise EmptyInputError('Condition distribution of empty dataset')
    if level == 'condition':
        labels = dataset.top1()
        size = dataset.taxonomy.numConditions
    elif level == 'category':
        labels = dataset.categories()
        size = dataset.taxonomy.numCategories
    else:
        raise ConfigError(f'Unknown level {level!r}')
    w = dataset.weightArray() if weighted else np.ones(len(dataset))
    counts = np.bincount(labels, weights=w, minlength=size)
    return ConditionDistribution(level, counts / counts.sum())


def stratifiedDownsample(
        dataset: Dataset, retention: Dict[str, float], seed) -> Dataset:
    """
    Keep every case independently with the retention rate of its
    stratum (1.0 for unlisted strata) and give each kept case the
    inverse-probability weight 1 / rate.
    """
    for stratum, rate in retention.items():
        if not 0 < rate <= 1:
            raise ConfigError(
                f'Retention rate {rate} of stratum {stratum!r} not in (0, 1]')
    gen = util.rng(seed, 'downsample')
    draws = gen.random(len(dataset))
    base = dataset.weightArray()
    kept = []
    weights = {}
    for i, case in enumerate(dataset.cases):
        rate = retention.get(case.stratum, 1.0)
        if rate == 1.0 or draws[i] < rate:
            kept.append(i)
            weights[case.caseId] = base[i] / rate
    ds = dataset.subset(kept)
    ds.weights = weights
    _logger.info(f'Downsampled {len(dataset)} to {len(ds)} cases')
    return ds


def saveDataset(dataset: Dataset, path):
    """
    Write the dataset as JSON Lines: a header line followed by
    one case per line.
    """
    header = {
        'schema_version': SCHEMA_VERSION,
        'D': dataset.dim,
        'taxonomy_hash': dataset.taxonomy.hash}
    with open(path, 'w') as f:
        f.write(json.dumps(header) + '\n')
        for case in dataset.cases:
            w = None if dataset.weights is None \
                else dataset.weights[case.caseId]
            f.write(json.dumps(case.record(w)) + '\n')


def loadDataset(path, taxonomy: ConditionTaxonomy) -> Dataset:
    """
    Load and validate a dataset file written by :func:`saveDataset`.
    """
    cases = []
    weights = {}
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DataError(f'Dataset file {path} is empty')
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as e:
        raise DataError(f'Dataset file {path} does not parse: {e}')
    if header.get('schema_version') != SCHEMA_VERSION:
        raise SchemaError(
            f'Unsupported schema version {header.get("schema_version")}')
    if header.get('taxonomy_hash') != taxonomy.hash:
        raise DataError(
            f'Taxonomy hash mismatch: file has {header.get("taxonomy_hash")}, '
            f'taxonomy is {taxonomy.hash}')
    for rec in records:
        case = Case.fromRecord(rec)
        cases.append(case)
        if 'weight' in rec:
            weights[case.caseId] = rec['weight']
    if weights and len(weights) != len(cases):
        raise SchemaError('Weights present for only some cases')
    ds = Dataset(cases, taxonomy, weights or None)
    if cases and ds.dim != header.get('D'):
        raise SchemaError(f'Header D={header.get("D")} but cases have {ds.dim}')
    _logger.info(f'Loaded {ds} from {path}')
    return ds


def splitDataset(dataset: Dataset, predicate):
    """
    Split into the cases that satisfy the predicate and the rest.
    """
    mask = [bool(predicate(c)) for c in dataset.cases]
    return (
        dataset.subset([i for i, m in enumerate(mask) if m]),
        dataset.subset([i for i, m in enumerate(mask) if not m]))
