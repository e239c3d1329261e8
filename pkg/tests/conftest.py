import numpy as np
import pytest
from scipy.special import softmax

from derm_shift.objects import (
    GeneratorConfig, RaterDiagnosis, Demographics, CaseAttrs)
from derm_shift.taxonomy import syntheticTaxonomy, defaultTaxonomy
from derm_shift.dataio import METADATA_NAMES, Case, Dataset, ageGroupOf
from derm_shift.generator import generateSyntheticSites


def unknownMetadata(**values):
    md = {name: 'unknown' for name in METADATA_NAMES}
    md.update(values)
    return md


def makeCase(caseId, condition, taxonomy, dim=2, embeddings=None,
        site='CLIN', sex='female', age=35.0, efst='I/II', panel=None,
        comparator=(), stratum=None, metadata=None):
    """
    Case whose three raters all name ``condition`` with confidence 5,
    unless an explicit panel of condition ids / (id, confidence)
    lists is given.
    """
    name = taxonomy.name
    if panel is None:
        panel = [[(condition, 5)]] * 3
    panel = tuple(
        tuple(RaterDiagnosis(name(c), conf) for c, conf in rater)
        for rater in panel)
    if embeddings is None:
        embeddings = np.zeros((1, dim))
    return Case(
        caseId=caseId,
        site=site,
        imageEmbeddings=np.asarray(embeddings, float),
        metadata=metadata or unknownMetadata(),
        age=age,
        demographics=Demographics(sex, ageGroupOf(age), efst),
        attrs=CaseAttrs('arm', 2019, frozenset()),
        panel=panel,
        stratum=stratum if stratum is not None else name(condition),
        trueCondition=condition,
        comparator=tuple(RaterDiagnosis(name(c), conf)
            for c, conf in comparator))


def makeDataset(conditions, taxonomy, prefix='c', weights=None, **kwargs):
    cases = [makeCase(f'{prefix}{i:05d}', c, taxonomy, **kwargs)
        for i, c in enumerate(conditions)]
    if weights is not None:
        weights = {case.caseId: w for case, w in zip(cases, weights)}
    return Dataset(cases, taxonomy, weights)


@pytest.fixture
def tax5():
    """
    Five conditions in two categories; every tenth condition
    (so condition 0) is high risk.
    """
    return syntheticTaxonomy(5, 2)


@pytest.fixture(scope='session')
def taxonomy():
    return defaultTaxonomy()


@pytest.fixture(scope='session')
def smallConfig():
    return GeneratorConfig(dim=16, nDev=600, nSite=300, seed=3)


@pytest.fixture(scope='session')
def smallSites(smallConfig, taxonomy):
    return generateSyntheticSites(smallConfig, taxonomy)


def imagePosterior(model, dataset, site='DEV'):
    """
    Posterior over conditions from the mean image embedding alone,
    using the generator's own cluster means and site prior.
    """
    cfg = model.config
    prior = model.devPrior if site == 'DEV' else model.sitePrior
    rows = []
    for case in dataset:
        n = len(case.imageEmbeddings)
        d2 = ((case.imageEmbeddings.mean(axis=0) - model.means) ** 2).sum(1)
        rows.append(np.log(prior) - n * d2 / (2 * cfg.noiseSigma ** 2))
    return softmax(np.array(rows), axis=1)
