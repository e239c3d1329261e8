"""
Training of the FiLM head and the final linear classifier with focal
loss and Adam at a constant learning rate.
"""

import json
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from derm_shift.objects import Object, TrainConfig, LossPoint
from derm_shift.errors import (
    ConfigError, DivergenceError, EmptyInputError, ShapeError, DataError)
from derm_shift.encoder import (
    MetadataSchema, FilmParams, MAX_IMAGES, metadataIndices, oneHotBatch,
    metadataDropoutBatch)
import derm_shift.util as util

__all__ = (
    'ModelParams Batch TrainResult Trainer focalLoss initParams train '
    'lossAndGradients gradCheck saveModel loadModel').split()

_logger = logging.getLogger('derm_shift.trainer')

PROB_FLOOR = 1e-12
FILM_PARAMS = (
    'metadataW', 'metadataB', 'alphaW', 'alphaB', 'betaW', 'betaB')
CLASSIFIER_PARAMS = ('classifierW', 'classifierB')
PARAM_NAMES = FILM_PARAMS + CLASSIFIER_PARAMS


class ModelParams(Object):
    """
    FiLM parameters, the final classifier ``logits = W f + b`` with
    ``W`` of shape ``(C, D)`` and the metadata schema the model
    was trained with.
    """
    defaults = {
        'film': None,
        'classifierW': None,
        'classifierB': None,
        'schema': None}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    @property
    def numConditions(self) -> int:
        return self.classifierW.shape[0]

    @property
    def dim(self) -> int:
        return self.classifierW.shape[1]

    def arrays(self) -> dict:
        """
        All trainable arrays by name.
        """
        d = {k: getattr(self.film, k) for k in FILM_PARAMS}
        d['classifierW'] = self.classifierW
        d['classifierB'] = self.classifierB
        return d

    def withArrays(self, arrays: dict) -> 'ModelParams':
        film = FilmParams(**{k: arrays[k] for k in FILM_PARAMS})
        return ModelParams(
            film, arrays['classifierW'], arrays['classifierB'], self.schema)

    def copy(self, **kwargs):
        arrays = {k: v.copy() for k, v in self.arrays().items()}
        return self.withArrays(arrays).update(**kwargs)

    def validate(self):
        self.film.validate()
        C, D = self.classifierW.shape
        if D != self.film.dim or self.classifierB.shape != (C,):
            raise ShapeError(
                f'Classifier shapes {self.classifierW.shape}, '
                f'{self.classifierB.shape} inconsistent with D={self.film.dim}')
        if self.schema is not None and \
                self.schema.inputDim != self.film.inputDim:
            raise ShapeError('Metadata schema width does not match FiLM input')
        if not (np.all(np.isfinite(self.classifierW)) and
                np.all(np.isfinite(self.classifierB))):
            raise ShapeError('Classifier has non-finite entries')
        return self

    def logits(self, images, metadata) -> np.ndarray:
        """
        Logits for a batch of aggregated images and encoded metadata.
        """
        return _forward(self.arrays(), images, metadata)[-1]


class Batch(Object):
    """
    Encoded training batch: aggregated images ``(N, D)``, encoded
    metadata ``(N, M_in)``, dense targets ``(N, C)`` with rows
    summing to one and per-case weights ``(N,)``.
    """
    defaults = {
        'images': None,
        'metadata': None,
        'targets': None,
        'weights': None}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def __len__(self):
        return len(self.images)


class TrainResult(Object):
    defaults = {
        'params': None,
        'lossTrace': ()}
    __slots__ = defaults.keys()
    __init__ = Object.__init__


def _focalTerms(p, alpha, gamma):
    pc = np.maximum(p, PROB_FLOOR)
    return -alpha * (1 - p) ** gamma * np.log(pc)


def focalLoss(probs, target, alpha: float, gamma: float) -> float:
    """
    Focal loss of a probability vector against a weighted
    differential (or a dense target vector with the same length).
    """
    probs = np.asarray(probs, float)
    if hasattr(target, 'dense'):
        t = target.dense(len(probs))
        if any(e.conditionId >= len(probs) for e in target):
            raise ShapeError('Target condition outside the probability vector')
    else:
        t = np.asarray(target, float)
    if t.shape != probs.shape:
        raise ShapeError(f'Target shape {t.shape} != {probs.shape}')
    mask = t > 0
    return float((t[mask] * _focalTerms(probs[mask], alpha, gamma)).sum())


def initParams(
        inputDim: int, dim: int, numConditions: int, embDim: int,
        seed, schema: MetadataSchema = None) -> ModelParams:
    """
    Uniform(-s, s) weights with ``s = 1 / sqrt(fan_in)``; zero biases
    except the alpha bias, which starts at one so that the FiLM layer
    starts as identity scaling.
    """
    gen = util.rng(seed, 'init')

    def uniform(fanIn, shape):
        s = 1 / math.sqrt(fanIn)
        return gen.uniform(-s, s, shape)

    film = FilmParams(
        metadataW=uniform(inputDim, (inputDim, embDim)),
        metadataB=np.zeros(embDim),
        alphaW=uniform(embDim, (embDim, dim)),
        alphaB=np.ones(dim),
        betaW=uniform(embDim, (embDim, dim)),
        betaB=np.zeros(dim))
    return ModelParams(
        film, uniform(dim, (numConditions, dim)), np.zeros(numConditions),
        schema)


def _forward(a, images, metadata):
    e = metadata @ a['metadataW'] + a['metadataB']
    alpha = e @ a['alphaW'] + a['alphaB']
    beta = e @ a['betaW'] + a['betaB']
    fused = beta + alpha * images
    z = fused @ a['classifierW'].T + a['classifierB']
    return e, alpha, fused, z


def lossAndGradients(
        params: ModelParams, batch: Batch, alpha: float, gamma: float,
        trainable=PARAM_NAMES) -> Tuple[float, dict]:
    """
    Weighted mean focal loss of the batch and its analytic gradients.
    Parameters not in ``trainable`` get all-zero gradients.
    """
    a = params.arrays()
    x, img, t = batch.metadata, batch.images, batch.targets
    w = batch.weights / batch.weights.sum()
    e, alphaVec, fused, z = _forward(a, img, x)
    p = softmax(z, axis=1)
    perCase = (t * _focalTerms(p, alpha, gamma)).sum(axis=1)
    loss = float(w @ perCase)

    # dL/dz = g - p * sum(g) with g_j = t_j p_j dl_j/dp_j;
    # below the floor the log term is constant in p
    oneMinus = 1 - p
    logp = np.log(np.maximum(p, PROB_FLOOR))
    if gamma:
        powm1 = np.power(
            oneMinus, gamma - 1, where=oneMinus > 0,
            out=np.zeros_like(p))
        first = -gamma * powm1 * p * logp
    else:
        first = 0.0
    second = np.where(p < PROB_FLOOR, 0.0, oneMinus ** gamma)
    g = -alpha * t * (first + second)
    dz = (g - p * g.sum(axis=1, keepdims=True)) * w[:, None]

    grads = {k: np.zeros_like(v) for k, v in a.items()}
    grads['classifierW'] = dz.T @ fused
    grads['classifierB'] = dz.sum(axis=0)
    if any(k in trainable for k in FILM_PARAMS):
        dFused = dz @ a['classifierW']
        dAlpha = dFused * img
        dBeta = dFused
        grads['alphaW'] = e.T @ dAlpha
        grads['alphaB'] = dAlpha.sum(axis=0)
        grads['betaW'] = e.T @ dBeta
        grads['betaB'] = dBeta.sum(axis=0)
        dE = dAlpha @ a['alphaW'].T + dBeta @ a['betaW'].T
        grads['metadataW'] = x.T @ dE
        grads['metadataB'] = dE.sum(axis=0)
    for k in PARAM_NAMES:
        if k not in trainable:
            grads[k] = np.zeros_like(a[k])
    return loss, grads


def gradCheck(params: ModelParams, batch: Batch, config: TrainConfig,
        eps: float) -> float:
    """
    Max relative error between analytic and central finite-difference
    gradients of the mean focal loss over every parameter entry.
    """
    if not eps > 0:
        raise ConfigError(f'Finite-difference step {eps} must be > 0')
    if not len(batch):
        raise EmptyInputError('Gradient check needs a nonempty batch')
    alpha, gamma = config.focalAlpha, config.focalGamma
    _, grads = lossAndGradients(params, batch, alpha, gamma)
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    worst = 0.0
    for k, arr in arrays.items():
        flat = arr.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = lossAndGradients(
                params.withArrays(arrays), batch, alpha, gamma)
            flat[i] = orig - eps
            down, _ = lossAndGradients(
                params.withArrays(arrays), batch, alpha, gamma)
            flat[i] = orig
            fd[i] = (up - down) / (2 * eps)
        an = grads[k].reshape(-1)
        rel = np.abs(an - fd) / np.maximum(1e-8, np.abs(an) + np.abs(fd))
        worst = max(worst, float(rel.max()))
    return worst


class _Adam:
    """
    Adam with the standard moment decay rates.
    """
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays, grads, names):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in names:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mHat = self.m[k] / (1 - b1 ** self.t)
            vHat = self.v[k] / (1 - b2 ** self.t)
            arrays[k] -= self.lr * mHat / (np.sqrt(vHat) + self.eps)


class _Encoded:
    """
    Training set encoded once: metadata indices, raw ages, image means
    for cases with at most six images, targets and weights.
    """
    def __init__(self, dataset, schema, targets):
        cases = dataset.cases
        C = dataset.taxonomy.numConditions
        self.indices = metadataIndices(cases, schema)
        self.ages = np.array([c.age for c in cases], float)
        self.images = np.array([
            c.imageEmbeddings.mean(axis=0) for c in cases])
        self.many = np.array(
            [c.numImages > MAX_IMAGES for c in cases], bool)
        self.cases = cases
        refs = dataset.references()
        if targets == 'weighted':
            self.targets = np.array([r.combined.dense(C) for r in refs])
        else:
            self.targets = np.eye(C)[[r.top1 for r in refs]]
        self.weights = dataset.weightArray()

    def batch(self, idx, schema, dropout, gen) -> Batch:
        images = self.images[idx].copy()
        for j in np.flatnonzero(self.many[idx]):
            emb = self.cases[idx[j]].imageEmbeddings
            pick = gen.choice(len(emb), MAX_IMAGES, replace=False)
            images[j] = emb[pick].mean(axis=0)
        indices = self.indices[idx]
        if dropout:
            indices = metadataDropoutBatch(indices, dropout, gen, schema)
        return Batch(
            images, oneHotBatch(indices, self.ages[idx], schema),
            self.targets[idx], self.weights[idx])


class Trainer:
    """
    Mini-batch focal-loss training.

    Events (set with :meth:`setCallback`):

    * ``lossRecorded(LossPoint)``: every ``traceEvery`` steps;
    * ``trainingDone(TrainResult)``.
    """
    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self._callbacks = {}

    def setCallback(self, eventName, callback):
        self._callbacks[eventName] = callback

    def _handleEvent(self, eventName, *args):
        cb = self._callbacks.get(eventName)
        if cb:
            try:
                cb(*args)
            except Exception:
                _logger.exception('Event %s(%s)', eventName, args)

    def train(self, dataset, init: Optional[ModelParams] = None) -> TrainResult:
        cfg = self.config
        if not len(dataset):
            raise EmptyInputError('Training set is empty')
        classifierOnly = cfg.mode == 'classifierOnly'
        if classifierOnly and init is None:
            raise ConfigError('Classifier-only training needs an init model')
        C = dataset.taxonomy.numConditions
        if init is None:
            schema = MetadataSchema.fit(dataset)
            params = initParams(
                schema.inputDim, dataset.dim, C, cfg.embeddingDim,
                cfg.seed, schema)
        else:
            params = init.copy()
            params.validate()
            if params.numConditions != C or params.dim != dataset.dim:
                raise ShapeError(
                    f'Init model (C={params.numConditions}, D={params.dim}) '
                    f'does not fit data (C={C}, D={dataset.dim})')
            if params.schema is None:
                params.schema = MetadataSchema.fit(dataset)
        schema = params.schema
        if cfg.steps == 0:
            return TrainResult(params, ())

        data = _Encoded(dataset, schema, cfg.targets)
        trainable = CLASSIFIER_PARAMS if classifierOnly else PARAM_NAMES
        frozen = [k for k in PARAM_NAMES if k not in trainable]
        arrays = params.arrays()
        adam = _Adam(arrays, cfg.learningRate)
        gen = util.rng(cfg.seed, 'train')
        N = len(dataset)
        trace: List[LossPoint] = []
        _logger.info(
            f'Training {cfg.mode} on {N} cases for {cfg.steps} steps')
        with util.timeit(f'Training {cfg.mode}'):
            for step in range(cfg.steps):
                idx = gen.integers(0, N, cfg.batchSize)
                batch = data.batch(idx, schema, cfg.metadataDropout, gen)
                loss, grads = lossAndGradients(
                    params, batch, cfg.focalAlpha, cfg.focalGamma, trainable)
                if not math.isfinite(loss):
                    raise DivergenceError(step, loss)
                for k in frozen:
                    assert not np.any(grads[k]), f'frozen {k} has gradient'
                if step % cfg.traceEvery == 0 or step == cfg.steps - 1:
                    point = LossPoint(step, loss)
                    trace.append(point)
                    self._handleEvent('lossRecorded', point)
                adam.step(arrays, grads, trainable)
        result = TrainResult(params, tuple(trace))
        _logger.info(f'Training done, final loss {trace[-1].loss:.4f}')
        self._handleEvent('trainingDone', result)
        return result


def train(dataset, config: TrainConfig,
        init: Optional[ModelParams] = None) -> TrainResult:
    """
    Train a model; see :class:`Trainer`.
    """
    return Trainer(config).train(dataset, init)


def saveModel(params: ModelParams, path, config: TrainConfig = None,
        taxonomyHash: str = ''):
    film = params.film
    doc = {
        'D': params.dim,
        'M_emb': film.embDim,
        'C': params.numConditions,
        'film': {k: getattr(film, k).tolist() for k in FILM_PARAMS},
        'classifier_W': params.classifierW.tolist(),
        'classifier_b': params.classifierB.tolist(),
        'train_config': config.dict() if config is not None else {},
        'taxonomy_hash': taxonomyHash,
        'schema': params.schema.document() if params.schema else None}
    with open(path, 'w') as f:
        json.dump(doc, f)


def loadModel(path, taxonomy=None) -> ModelParams:
    """
    Load a model artifact, checking it against the taxonomy when given.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f'Model file {path} does not parse: {e}')
    try:
        film = FilmParams(**{
            k: np.array(doc['film'][k], float) for k in FILM_PARAMS})
        schema = MetadataSchema.fromDocument(doc['schema']) \
            if doc.get('schema') else None
        params = ModelParams(
            film, np.array(doc['classifier_W'], float),
            np.array(doc['classifier_b'], float), schema)
    except (KeyError, TypeError) as e:
        raise DataError(f'Malformed model file {path}: {e!r}')
    params.validate()
    if (params.dim, params.numConditions) != (doc.get('D'), doc.get('C')):
        raise ShapeError('Model header does not match its arrays')
    if taxonomy is not None and doc.get('taxonomy_hash') != taxonomy.hash:
        raise DataError('Model was trained on a different taxonomy')
    return params
