from collections import namedtuple

import numpy as np

from derm_shift.errors import ConfigError

__all__ = (
    'Object GeneratorConfig TrainConfig AugmentConfig MatchConfig '
    'CalibConfig ThresholdConfig EvalConfig ExperimentConfig '
    'RaterDiagnosis MappedDiagnosis WeightedEntry ScoredCondition '
    'Demographics CaseAttrs MetricResult RegressionRow LossPoint '
    'StratumRow ArmResult'
    ).split()


def _equal(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (np.shape(a) == np.shape(b) and
                np.array_equal(np.asarray(a), np.asarray(b)))
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        return len(a) == len(b) and all(_equal(x, y) for x, y in zip(a, b))
    return a == b


class Object:
    """
    Base object, with:

    * __slots__ to avoid typos;
    * A general constructor;
    * A general string representation;
    * A default equality testing that compares attributes,
      numpy arrays included.
    """
    __slots__ = ()
    defaults = {}

    def __init__(self, *args, **kwargs):
        """
        Attribute values can be given positionally or as keyword.
        If an attribute is not given it will take its value from the
        'defaults' class member. If an attribute is given both positionally
        and as keyword, the keyword wins.
        """
        for k, v in self.__class__.defaults.items():
            setattr(self, k, v)
        for k, v in zip(self.__class__.defaults, args):
            setattr(self, k, v)
        for k, v in kwargs.items():
            setattr(self, k, v)

    def __repr__(self):
        clsName = self.__class__.__name__
        kwargs = ', '.join(f'{k}={v!r}' for k, v in self.nonDefaults().items())
        return f'{clsName}({kwargs})'

    __str__ = __repr__

    def __eq__(self, other):
        return (isinstance(other, self.__class__) and
                all(_equal(getattr(self, k), getattr(other, k))
                    for k in self.__class__.defaults))

    __hash__ = None

    def tuple(self):
        """
        Return values as a tuple.
        """
        return tuple(getattr(self, k) for k in self.__class__.defaults)

    def dict(self):
        """
        Return key-value pairs as a dictionary. Nested objects
        are converted too.
        """
        return {k: _plain(getattr(self, k)) for k in self.__class__.defaults}

    def update(self, **kwargs):
        """
        Update key values.
        """
        for k, v in kwargs.items():
            setattr(self, k, v)
        return self

    def copy(self, **kwargs):
        """
        Return a shallow copy with the given key values replaced.
        """
        obj = self.__class__.__new__(self.__class__)
        for k in self.__class__.defaults:
            setattr(obj, k, getattr(self, k))
        return obj.update(**kwargs)

    def diff(self, other):
        """
        Return differences between self and other as dictionary of 2-tuples.
        """
        diff = {}
        for k in self.__class__.defaults:
            l = getattr(self, k)
            r = getattr(other, k)
            if not _equal(l, r):
                diff[k] = (l, r)
        return diff

    def nonDefaults(self):
        """
        Get a dictionary of all attributes that differ from the default.
        """
        nonDefaults = {}
        for k, d in self.__class__.defaults.items():
            v = getattr(self, k)
            if not _equal(v, d):
                nonDefaults[k] = v
        return nonDefaults


def _plain(v):
    if isinstance(v, Object):
        return v.dict()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


class Config(Object):
    """
    Configuration record. Unknown keys are rejected when
    created from a plain dictionary.
    """
    __slots__ = ()
    nested = {}

    @classmethod
    def fromDict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(cls.defaults)
        if unknown:
            raise ConfigError(
                f'Unknown {cls.__name__} keys: {", ".join(sorted(unknown))}')
        for k, subCls in cls.nested.items():
            if k in d and not isinstance(d[k], Object):
                d[k] = subCls.fromDict(d[k])
        obj = cls(**d)
        obj.validate()
        return obj

    def validate(self):
        pass

    def _check(self, condition, msg):
        if not condition:
            raise ConfigError(f'{self.__class__.__name__}: {msg}')


class GeneratorConfig(Config):
    """
    Knobs of the synthetic two-site generator. The Dirichlet
    concentrations can be a scalar (expanded over all conditions)
    or one value per condition.

    Whole categories covering ``hotFraction`` of the conditions are
    "hot": their prior mass is scaled by ``hotDevWeight`` at DEV and by
    ``hotSiteWeight`` at the site. Raters read a private view of the
    case: the true cluster mean, ``raterImageWeight`` of the image
    noise and their own noise of scale ``raterSigma``.
    """
    defaults = {
        'numConditions': 40,
        'numCategories': 12,
        'dim': 64,
        'nDev': 5000,
        'nSite': 1000,
        'clusterSeparation': 2.5,
        'noiseSigma': 2.0,
        'dirichletDev': 1.0,
        'dirichletSite': 1.0,
        'hotFraction': 0.25,
        'hotDevWeight': 0.1,
        'hotSiteWeight': 1.5,
        'patFraction': 0.25,
        'raterNoise': 0.6,
        'raterSigma': 0.55,
        'raterImageWeight': 0.25,
        'raterTemperature': 1.0,
        'qualityNoise': 0.0,
        'patQualityNoise': 0.0,
        'maxImages': 8,
        'devPriorSeed': None,
        'sitePriorSeed': None,
        'seed': 0}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        for k in ('numConditions', 'numCategories', 'dim', 'nDev', 'nSite',
                'maxImages'):
            self._check(getattr(self, k) >= 1, f'{k} must be >= 1')
        self._check(self.numCategories <= self.numConditions,
            'more categories than conditions')
        self._check(self.noiseSigma > 0, 'noiseSigma must be > 0')
        self._check(self.clusterSeparation >= 0,
            'clusterSeparation must be >= 0')
        self._check(0 <= self.patFraction <= 1, 'patFraction not in [0, 1]')
        self._check(0 <= self.raterNoise <= 1, 'raterNoise not in [0, 1]')
        self._check(self.raterTemperature > 0, 'raterTemperature must be > 0')
        self._check(self.raterSigma > 0, 'raterSigma must be > 0')
        self._check(0 <= self.raterImageWeight <= 1,
            'raterImageWeight not in [0, 1]')
        self._check(0 <= self.hotFraction < 1, 'hotFraction not in [0, 1)')
        self._check(self.hotDevWeight > 0 and self.hotSiteWeight > 0,
            'hot weights must be > 0')
        self._check(self.qualityNoise >= 0 and self.patQualityNoise >= 0,
            'quality noise must be >= 0')
        for k in ('dirichletDev', 'dirichletSite'):
            conc = np.atleast_1d(np.asarray(getattr(self, k), float))
            self._check(conc.size in (1, self.numConditions),
                f'{k} needs 1 or {self.numConditions} entries')
            self._check(np.all(conc > 0), f'{k} must be > 0')
        self._check(0 <= self.seed < 2 ** 64, 'seed must be unsigned 64-bit')


class TrainConfig(Config):
    """
    Training of the FiLM head with focal loss and Adam.
    ``mode`` is 'endToEnd' or 'classifierOnly';
    ``targets`` is 'top1' (hard reference label) or 'weighted'
    (the full weighted differential).
    """
    defaults = {
        'focalAlpha': 0.25,
        'focalGamma': 2.0,
        'learningRate': 1e-3,
        'steps': 5000,
        'batchSize': 64,
        'metadataDropout': 0.25,
        'mode': 'endToEnd',
        'targets': 'top1',
        'embeddingDim': 32,
        'traceEvery': 50,
        'seed': 0}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    Modes = ('endToEnd', 'classifierOnly')
    Targets = ('top1', 'weighted')

    def validate(self):
        self._check(self.focalAlpha > 0, 'focalAlpha must be > 0')
        self._check(self.focalGamma >= 0, 'focalGamma must be >= 0')
        self._check(self.learningRate > 0, 'learningRate must be > 0')
        self._check(self.steps >= 0, 'steps must be >= 0')
        self._check(self.batchSize >= 1, 'batchSize must be >= 1')
        self._check(0 <= self.metadataDropout <= 1,
            'metadataDropout not in [0, 1]')
        self._check(self.mode in self.Modes, f'unknown mode {self.mode!r}')
        self._check(self.targets in self.Targets,
            f'unknown targets {self.targets!r}')
        self._check(self.embeddingDim >= 1, 'embeddingDim must be >= 1')
        self._check(self.traceEvery >= 1, 'traceEvery must be >= 1')


class AugmentConfig(Config):
    """
    Condition-aware augmentation. When ``nAdd`` is None the
    number of added cases is ``poolFraction`` of the site pool.
    """
    defaults = {
        'alpha': 0.7,
        'nAdd': None,
        'poolFraction': 0.5,
        'level': 'condition',
        'seed': 0}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        self._check(0 <= self.alpha <= 1,
            'alpha not in [0, 1]')
        self._check(self.nAdd is None or self.nAdd >= 0, 'nAdd must be >= 0')
        self._check(0 < self.poolFraction <= 1, 'poolFraction not in (0, 1]')
        self._check(self.level in ('condition', 'category'),
            f'unknown level {self.level!r}')


class MatchConfig(Config):
    """
    Metropolis-Hastings distribution matching.
    """
    defaults = {
        'burnIn': 1000,
        'nOut': None,
        'level': 'category',
        'seed': 0}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        self._check(self.burnIn >= 0, 'burnIn must be >= 0')
        self._check(self.nOut is None or self.nOut >= 0, 'nOut must be >= 0')
        self._check(self.level in ('condition', 'category'),
            f'unknown level {self.level!r}')


class CalibConfig(Config):
    """
    Score recalibration. Categories with fewer than
    ``minCategoryCases`` calibration cases use the global temperature.
    """
    defaults = {
        'bins': 10,
        'calibFraction': 0.2,
        'iterations': 60,
        'minCategoryCases': 10}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        self._check(self.bins >= 1, 'bins must be >= 1')
        self._check(0 < self.calibFraction < 1, 'calibFraction not in (0, 1)')
        self._check(self.iterations >= 1, 'iterations must be >= 1')
        self._check(self.minCategoryCases >= 1,
            'minCategoryCases must be >= 1')


class ThresholdConfig(Config):
    defaults = {
        'kMin': 3,
        'kMax': 7,
        'target': 0.95}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        self._check(1 <= self.kMin <= self.kMax, 'need 1 <= kMin <= kMax')
        self._check(0 < self.target <= 1, 'target not in (0, 1]')


class EvalConfig(Config):
    defaults = {
        'nBoot': 2000,
        'level': 0.95,
        'topK': (1, 3),
        'devHoldoutFraction': 0.2}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    def validate(self):
        self._check(self.nBoot >= 1, 'nBoot must be >= 1')
        self._check(0 < self.level < 1, 'level not in (0, 1)')
        self._check(all(k >= 1 for k in self.topK), 'topK must be >= 1')
        self._check(0 < self.devHoldoutFraction < 1,
            'devHoldoutFraction not in (0, 1)')


class ExperimentConfig(Config):
    """
    Everything needed to run the intervention ladder. The
    ``finetune`` section drives the classifier-only arms.
    """
    defaults = {
        'generator': None,
        'train': None,
        'finetune': None,
        'augment': None,
        'match': None,
        'calib': None,
        'threshold': None,
        'eval': None,
        'siteRetention': None,
        'outputDir': 'report',
        'seeds': (7,),
        'maxWorkers': 1}
    __slots__ = defaults.keys()
    nested = {
        'generator': GeneratorConfig,
        'train': TrainConfig,
        'finetune': TrainConfig,
        'augment': AugmentConfig,
        'match': MatchConfig,
        'calib': CalibConfig,
        'threshold': ThresholdConfig,
        'eval': EvalConfig}

    def __init__(self, *args, **kwargs):
        Object.__init__(self, *args, **kwargs)
        for k, subCls in self.nested.items():
            if getattr(self, k) is None:
                sub = subCls()
                if k == 'finetune':
                    sub.update(mode='classifierOnly', steps=2000)
                setattr(self, k, sub)

    def validate(self):
        for k in self.nested:
            getattr(self, k).validate()
        self._check(len(self.seeds) >= 1, 'seeds must be nonempty')
        self._check(self.maxWorkers >= 1, 'maxWorkers must be >= 1')
        for stratum, rate in (self.siteRetention or {}).items():
            self._check(0 < rate <= 1,
                f'retention rate {rate} of {stratum!r} not in (0, 1]')


RaterDiagnosis = namedtuple('RaterDiagnosis',
    'rawName confidence')

MappedDiagnosis = namedtuple('MappedDiagnosis',
    'conditionId confidence')

WeightedEntry = namedtuple('WeightedEntry',
    'conditionId weight')

ScoredCondition = namedtuple('ScoredCondition',
    'conditionId score')

Demographics = namedtuple('Demographics',
    'sex ageGroup efst')

CaseAttrs = namedtuple('CaseAttrs',
    'anatomicLocation year qualityFlags')

MetricResult = namedtuple('MetricResult',
    'value ciLo ciHi n weighted')

RegressionRow = namedtuple('RegressionRow', (
    'factor level logOdds stdErr pValue significantBonferroni '
    'groupSize count advisory'))

LossPoint = namedtuple('LossPoint',
    'step loss')

StratumRow = namedtuple('StratumRow',
    'factor level result')

ArmResult = namedtuple('ArmResult',
    'seed arm metric result evalHash')
