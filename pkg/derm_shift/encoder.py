"""
Case encoding: metadata one-hot plus standardized age, metadata
dropout, image aggregation and feature-wise linear modulation (FiLM)
of the image embedding by the metadata embedding.
"""

from typing import Sequence

import numpy as np

from derm_shift.objects import Object
from derm_shift.errors import (
    ConfigError, SchemaError, EmptyInputError, ShapeError)
from derm_shift.dataio import METADATA_FIELDS

__all__ = (
    'UNKNOWN MAX_IMAGES MetadataSchema FilmParams encodeMetadata '
    'encodeMetadataBatch metadataIndices oneHotBatch metadataDropout '
    'metadataDropoutBatch aggregateImages filmFuse').split()

UNKNOWN = 'unknown'
MAX_IMAGES = 6


class MetadataSchema(Object):
    """
    Ordered metadata fields with their allowed values ('unknown' last
    in every field) and the age standardization.
    """
    defaults = {
        'fields': (),
        'ageMean': 45.0,
        'ageStd': 18.0}
    __slots__ = list(defaults.keys()) + ['_offsets', '_lookup']

    def __init__(self, fields=None, ageMean=45.0, ageStd=18.0):
        if fields is None:
            fields = METADATA_FIELDS
        fields = tuple(
            (name, tuple(values) if UNKNOWN in values
                else tuple(values) + (UNKNOWN,))
            for name, values in fields)
        if len(fields) != 25:
            raise SchemaError(f'Schema has {len(fields)} fields, needs 25')
        if not ageStd > 0:
            raise SchemaError(f'Age std {ageStd} must be > 0')
        Object.__init__(self, fields, float(ageMean), float(ageStd))
        sizes = [len(values) for _, values in fields]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self._lookup = [
            {v: i for i, v in enumerate(values)} for _, values in fields]

    @classmethod
    def fit(cls, dataset, fields=None) -> 'MetadataSchema':
        """
        Schema with the age mean and std fitted on the dataset.
        """
        ages = np.array([c.age for c in dataset], float)
        if not len(ages):
            raise EmptyInputError('Cannot fit schema on empty dataset')
        std = ages.std()
        return cls(fields, ages.mean(), std if std > 0 else 1.0)

    @property
    def inputDim(self) -> int:
        """
        Width M_in of the encoded metadata vector.
        """
        return sum(len(values) for _, values in self.fields) + 1

    @property
    def offsets(self) -> np.ndarray:
        return self._offsets

    def unknownIndices(self) -> np.ndarray:
        return np.array([len(values) - 1 for _, values in self.fields])

    def indices(self, metadata: dict, caseId=None) -> np.ndarray:
        """
        Position of each field's value within its allowed values.
        """
        idx = np.empty(len(self.fields), int)
        for i, (name, _) in enumerate(self.fields):
            value = metadata.get(name, None)
            j = self._lookup[i].get(value)
            if j is None:
                raise SchemaError(
                    f'Value {value!r} not allowed', caseId,
                    f'{i + 1} ({name})')
            idx[i] = j
        return idx

    def standardizeAge(self, age):
        return (np.asarray(age, float) - self.ageMean) / self.ageStd

    def document(self) -> dict:
        return {
            'fields': [{'name': n, 'values': list(v)} for n, v in self.fields],
            'age_mean': self.ageMean,
            'age_std': self.ageStd}

    @classmethod
    def fromDocument(cls, doc) -> 'MetadataSchema':
        try:
            fields = [(f['name'], f['values']) for f in doc['fields']]
            return cls(fields, doc['age_mean'], doc['age_std'])
        except (KeyError, TypeError) as e:
            raise SchemaError(f'Malformed metadata schema: {e!r}')


def encodeMetadata(metadata: dict, age: float, schema: MetadataSchema,
        caseId=None) -> np.ndarray:
    """
    Concatenated per-field one-hot blocks followed by the
    standardized age.
    """
    idx = schema.indices(metadata, caseId)
    return oneHotBatch(idx[None, :], np.array([age]), schema)[0]


def metadataIndices(cases, schema: MetadataSchema) -> np.ndarray:
    """
    Index matrix of shape ``(len(cases), 25)``.
    """
    if not len(cases):
        return np.empty((0, len(schema.fields)), int)
    return np.array([schema.indices(c.metadata, c.caseId) for c in cases])


def oneHotBatch(indices: np.ndarray, ages, schema: MetadataSchema):
    """
    Dense encodings from an index matrix and raw ages.
    """
    N = len(indices)
    out = np.zeros((N, schema.inputDim))
    rows = np.repeat(np.arange(N), indices.shape[1])
    cols = (indices + schema.offsets[None, :]).ravel()
    out[rows, cols] = 1.0
    out[:, -1] = schema.standardizeAge(ages)
    return out


def encodeMetadataBatch(cases, schema: MetadataSchema) -> np.ndarray:
    return oneHotBatch(
        metadataIndices(cases, schema),
        np.array([c.age for c in cases], float), schema)


def _checkP(p):
    if not 0 <= p <= 1:
        raise ConfigError(f'Dropout probability {p} not in [0, 1]')


def metadataDropout(metadata: dict, p: float, rng) -> dict:
    """
    Replace every field independently by 'unknown' with probability p.
    """
    _checkP(p)
    draws = rng.random(len(metadata))
    return {k: UNKNOWN if u < p else v
            for u, (k, v) in zip(draws, metadata.items())}


def metadataDropoutBatch(indices: np.ndarray, p: float, rng,
        schema: MetadataSchema) -> np.ndarray:
    """
    Dropout applied to an index matrix; returns a new matrix.
    """
    _checkP(p)
    mask = rng.random(indices.shape) < p
    return np.where(mask, schema.unknownIndices()[None, :], indices)


def aggregateImages(embeddings: Sequence[np.ndarray], rng) -> np.ndarray:
    """
    Mean of the image embeddings; cases with more than six images
    use six chosen uniformly without replacement.
    """
    emb = np.asarray(embeddings, float)
    if not len(emb):
        raise EmptyInputError('Case has no image embeddings')
    if len(emb) > MAX_IMAGES:
        emb = emb[rng.choice(len(emb), MAX_IMAGES, replace=False)]
    return emb.mean(axis=0)


class FilmParams(Object):
    """
    Affine metadata projection followed by the affine alpha and beta
    projections that scale and shift the image embedding.
    Matrices are stored input-major: ``metadataW`` is ``(M_in, M_emb)``,
    ``alphaW`` and ``betaW`` are ``(M_emb, D)``.
    """
    defaults = {
        'metadataW': None,
        'metadataB': None,
        'alphaW': None,
        'alphaB': None,
        'betaW': None,
        'betaB': None}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    @property
    def inputDim(self) -> int:
        return self.metadataW.shape[0]

    @property
    def embDim(self) -> int:
        return self.metadataW.shape[1]

    @property
    def dim(self) -> int:
        return self.alphaW.shape[1]

    def validate(self):
        M_in, M = self.metadataW.shape
        D = self.alphaW.shape[1]
        expected = {
            'metadataB': (M,), 'alphaW': (M, D), 'alphaB': (D,),
            'betaW': (M, D), 'betaB': (D,)}
        for k, shape in expected.items():
            if np.shape(getattr(self, k)) != shape:
                raise ShapeError(
                    f'FiLM {k} has shape {np.shape(getattr(self, k))}, '
                    f'expected {shape}')
        for k in self.defaults:
            if not np.all(np.isfinite(getattr(self, k))):
                raise ShapeError(f'FiLM {k} has non-finite entries')
        return self


def filmFuse(imageEmb, metadataVec, params: FilmParams) -> np.ndarray:
    """
    ``beta(E) + alpha(E) * image`` with ``E`` the projected metadata.
    Works on single vectors or on batches stacked along the first axis.
    """
    imageEmb = np.asarray(imageEmb, float)
    metadataVec = np.asarray(metadataVec, float)
    if metadataVec.shape[-1] != params.inputDim:
        raise ShapeError(
            f'Metadata width {metadataVec.shape[-1]} != {params.inputDim}')
    if imageEmb.shape[-1] != params.dim:
        raise ShapeError(
            f'Image embedding width {imageEmb.shape[-1]} != {params.dim}')
    if imageEmb.shape[:-1] != metadataVec.shape[:-1]:
        raise ShapeError('Image and metadata batch sizes differ')
    e = metadataVec @ params.metadataW + params.metadataB
    alpha = e @ params.alphaW + params.alphaB
    beta = e @ params.betaW + params.betaB
    return beta + alpha * imageEmb
