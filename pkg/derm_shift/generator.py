"""
Synthetic two-site data: a development (DEV) site and a target site
whose cases are tagged CLIN or PAT. Both sites share the per-condition
embedding clusters; only the condition priors differ, which gives a
pure label shift between them.
"""

import logging
import math

import numpy as np

from derm_shift.objects import (
    GeneratorConfig, RaterDiagnosis, Demographics, CaseAttrs)
from derm_shift.errors import ConfigError
from derm_shift.taxonomy import ConditionTaxonomy, defaultTaxonomy
from derm_shift.labels import referenceLabel
from derm_shift.dataio import (
    METADATA_FIELDS, EfstBands, Case, Dataset, ageGroupOf)
import derm_shift.util as util

__all__ = ['generateSyntheticSites', 'SiteModel']

_logger = logging.getLogger('derm_shift.generator')

NUM_INFORMATIVE = 10
MISSING_RATE = 0.05
SYNONYM_RATE = 0.25
UNMAPPED_RATE = 0.05
UNMAPPED_NAMES = ('unspecified rash', 'see notes', 'lesion NOS')

LOCATIONS = (
    'head_neck', 'trunk', 'arm', 'hand', 'leg', 'foot', 'genitalia')
QUALITY_FLAGS = ('blurry', 'poor_lighting', 'non_skin_area')
YEARS = (2017, 2018, 2019, 2020)
EFST_PROBS = (0.45, 0.35, 0.05, 0.15)


class SiteModel:
    """
    The shared part of the generative model: cluster means, the
    condition-specific metadata answers and the two site priors.

    Both priors start from the same Dirichlet draw (unless the
    concentrations or prior seeds differ) and then scale the mass of
    the hot categories, so the shift lives at the category level.
    Categories holding a high-risk condition are never hot.
    """
    def __init__(self, config: GeneratorConfig, taxonomy: ConditionTaxonomy):
        C, D = config.numConditions, config.dim
        self.config = config
        self.taxonomy = taxonomy
        gen = util.rng(config.seed, 'clusters')
        directions = gen.standard_normal((C, D)) / math.sqrt(D)
        self.means = config.clusterSeparation * directions
        self.symbols = np.array([
            gen.integers(len(values), size=C)
            for _, values in METADATA_FIELDS[:NUM_INFORMATIVE]]).T
        self.hotCategories = self._hotCategories()
        hot = np.isin(taxonomy.categoryIndex, self.hotCategories)
        self.devPrior = self._prior(
            config.dirichletDev, config.devPriorSeed,
            np.where(hot, config.hotDevWeight, 1.0))
        self.sitePrior = self._prior(
            config.dirichletSite, config.sitePriorSeed,
            np.where(hot, config.hotSiteWeight, 1.0))

    def _hotCategories(self):
        tax = self.taxonomy
        risky = set(tax.categoryIndex[tax.highRiskMask()].tolist())
        eligible = [k for k in range(tax.numCategories) if k not in risky]
        order = util.rng(self.config.seed, 'hotCategories').permutation(
            len(eligible))
        wanted = self.config.hotFraction * tax.numConditions
        hot = []
        size = 0
        for j in order:
            if size >= wanted:
                break
            hot.append(eligible[j])
            size += len(tax.members(eligible[j]))
        return sorted(hot)

    def _prior(self, concentration, priorSeed, scale):
        C = self.config.numConditions
        conc = np.broadcast_to(
            np.asarray(concentration, float), (C,)).copy()
        gen = util.rng(priorSeed) if priorSeed is not None \
            else util.rng(self.config.seed, 'prior')
        p = gen.dirichlet(conc) * scale
        return p / p.sum()

    def readout(self, condition, meanEmb, numImages, gen, numDiagnoses):
        """
        Simulated rater. The rater looks at the true cluster mean blurred
        by part of the case's image noise and by noise of its own, and
        ranks the clusters by log-likelihood plus Gumbel noise;
        confidences drop with the score gap to the top choice.
        With two or more diagnoses the last one is sometimes replaced
        by a free-text answer that maps to no condition.
        """
        cfg = self.config
        lam = cfg.raterImageWeight
        var = cfg.raterSigma ** 2 + \
            lam ** 2 * cfg.noiseSigma ** 2 / numImages
        truth = self.means[condition]
        view = truth + lam * (meanEmb - truth) + \
            cfg.raterSigma * gen.standard_normal(len(truth))
        d2 = ((view - self.means) ** 2).sum(axis=1)
        scores = -d2 / (2 * var) + \
            cfg.raterTemperature * gen.gumbel(size=len(d2))
        order = np.argsort(-scores, kind='stable')[:numDiagnoses]
        synDraws = gen.random(numDiagnoses)
        synPicks = gen.random(numDiagnoses)
        diagnoses = []
        for j, c in enumerate(order):
            gap = scores[order[0]] - scores[c]
            confidence = int(np.clip(5 - math.ceil(gap / 2), 1, 5))
            cond = self.taxonomy.conditions[c]
            name = cond.name
            if cond.synonyms and synDraws[j] < SYNONYM_RATE:
                name = cond.synonyms[int(synPicks[j] * len(cond.synonyms))]
            diagnoses.append(RaterDiagnosis(name, confidence))
        if len(diagnoses) > 1 and gen.random() < UNMAPPED_RATE:
            diagnoses[-1] = RaterDiagnosis(
                UNMAPPED_NAMES[gen.integers(len(UNMAPPED_NAMES))],
                diagnoses[-1].confidence)
        return tuple(diagnoses)

    def makeCase(self, caseId, site, condition, gen, withComparator):
        cfg = self.config
        D = cfg.dim
        numImages = int(gen.integers(1, cfg.maxImages + 1))
        noise = gen.standard_normal((numImages, D)) * cfg.noiseSigma
        emb = self.means[condition] + noise

        if site == 'DEV':
            tag = 'DEV'
        else:
            tag = 'PAT' if gen.random() < cfg.patFraction else 'CLIN'
        sex = 'female' if gen.random() < 0.55 else 'male'
        age = float(np.clip(gen.normal(45, 18), 1, 95))
        efst = EfstBands[gen.choice(len(EfstBands), p=EFST_PROBS)]
        location = LOCATIONS[gen.integers(len(LOCATIONS))]
        year = YEARS[gen.integers(len(YEARS))]
        flags = frozenset(
            f for f, u in zip(QUALITY_FLAGS, gen.random(len(QUALITY_FLAGS)))
            if u < 0.1)
        extra = cfg.qualityNoise * bool(flags) + \
            cfg.patQualityNoise * (tag == 'PAT')
        extraNoise = gen.standard_normal((numImages, D))
        if extra:
            emb = emb + extra * extraNoise

        metadata = {}
        flips = gen.random(len(METADATA_FIELDS))
        picks = gen.random(len(METADATA_FIELDS))
        missing = gen.random(len(METADATA_FIELDS))
        for i, (name, values) in enumerate(METADATA_FIELDS):
            value = values[int(picks[i] * len(values))]
            if i < NUM_INFORMATIVE and flips[i] >= cfg.raterNoise:
                value = values[self.symbols[condition, i]]
            elif name == 'sex_reported':
                value = sex
            elif name == 'skin_type_reported':
                value = efst if efst != 'Unknown' else 'unknown'
            if missing[i] < MISSING_RATE:
                value = 'unknown'
            metadata[name] = value

        meanEmb = emb.mean(axis=0)
        panel = tuple(
            self.readout(
                condition, meanEmb, numImages, gen, int(gen.integers(1, 4)))
            for _ in range(3))
        comparator = self.readout(condition, meanEmb, numImages, gen, 3) \
            if withComparator else ()
        case = Case(
            caseId=caseId,
            site=tag,
            imageEmbeddings=emb,
            metadata=metadata,
            age=age,
            demographics=Demographics(sex, ageGroupOf(age), efst),
            attrs=CaseAttrs(location, year, flags),
            panel=panel,
            trueCondition=int(condition),
            comparator=comparator)
        ref = referenceLabel(case, self.taxonomy)
        case.stratum = self.taxonomy.name(ref.top1)
        return case

    def sample(self, site, n):
        prior = self.devPrior if site == 'DEV' else self.sitePrior
        prefix = 'dev' if site == 'DEV' else 'site'
        conditions = util.rng(self.config.seed, 'conditions', prefix).choice(
            self.config.numConditions, size=n, p=prior)
        cases = [
            self.makeCase(
                f'{prefix}-{i:05d}', site, c,
                util.rng(self.config.seed, 'case', prefix, i),
                withComparator=site != 'DEV')
            for i, c in enumerate(conditions)]
        return Dataset(cases, self.taxonomy)


def generateSyntheticSites(
        config: GeneratorConfig, taxonomy: ConditionTaxonomy = None):
    """
    Generate the DEV dataset and the shifted target-site dataset.
    Fully deterministic given ``config.seed`` (and the optional prior
    seeds). Returns ``(dev, site)``.
    """
    config.validate()
    if taxonomy is None:
        taxonomy = defaultTaxonomy(config.numConditions, config.numCategories)
    if (taxonomy.numConditions, taxonomy.numCategories) != \
            (config.numConditions, config.numCategories):
        raise ConfigError(
            f'Taxonomy has C={taxonomy.numConditions}, '
            f'K={taxonomy.numCategories}; config wants '
            f'C={config.numConditions}, K={config.numCategories}')
    model = SiteModel(config, taxonomy)
    with util.timeit('Synthetic generation'):
        dev = model.sample('DEV', config.nDev)
        site = model.sample('SITE', config.nSite)
    _logger.info(f'Generated {dev} and {site}')
    return dev, site
