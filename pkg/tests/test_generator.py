import numpy as np
import pytest

from derm_shift.objects import GeneratorConfig
from derm_shift.generator import generateSyntheticSites, SiteModel
from derm_shift.dataio import conditionDistribution, METADATA_NAMES
from derm_shift.taxonomy import syntheticTaxonomy
from derm_shift.errors import ConfigError


def test_deterministic(smallConfig, smallSites, taxonomy):
    dev, site = generateSyntheticSites(smallConfig, taxonomy)
    assert dev == smallSites[0]
    assert site == smallSites[1]


def test_seed_changes_output(smallConfig, smallSites, taxonomy):
    dev, _ = generateSyntheticSites(smallConfig.copy(seed=4), taxonomy)
    assert dev != smallSites[0]


def test_shapes_and_tags(smallConfig, smallSites):
    dev, site = smallSites
    assert len(dev) == smallConfig.nDev
    assert len(site) == smallConfig.nSite
    assert {c.site for c in dev} == {'DEV'}
    assert {c.site for c in site} == {'CLIN', 'PAT'}
    for case in list(dev) + list(site):
        assert 1 <= case.numImages <= smallConfig.maxImages
        assert case.imageEmbeddings.shape[1] == smallConfig.dim
        assert set(case.metadata) == set(METADATA_NAMES)
        assert len(case.panel) == 3
    assert all(len(c.comparator) == 3 for c in site)
    assert all(not c.comparator for c in dev)


def test_no_pathology_cases(smallConfig, taxonomy):
    _, site = generateSyntheticSites(
        smallConfig.copy(patFraction=0.0, nDev=10), taxonomy)
    assert {c.site for c in site} == {'CLIN'}


def test_stratum_is_reference_top1(smallSites, taxonomy):
    _, site = smallSites
    for case, ref in zip(site, site.references()):
        assert case.stratum == taxonomy.name(ref.top1)


def test_priors_differ(smallConfig, smallSites):
    dev, site = smallSites
    assert conditionDistribution(dev).tv(conditionDistribution(site)) > 0.1


def test_equal_priors_give_matching_distributions():
    tax = syntheticTaxonomy(10, 3)
    config = GeneratorConfig(
        numConditions=10, numCategories=3, dim=8, nDev=5000, nSite=5000,
        maxImages=2, dirichletDev=1.0, dirichletSite=1.0,
        hotDevWeight=1.0, hotSiteWeight=1.0,
        devPriorSeed=1, sitePriorSeed=1, seed=2)
    dev, site = generateSyntheticSites(config, tax)
    assert conditionDistribution(dev).tv(conditionDistribution(site)) <= 0.05


def test_zero_separation_raters_agree_by_chance(taxonomy):
    config = GeneratorConfig(
        dim=8, nDev=2000, nSite=1, clusterSeparation=0.0, seed=8)
    dev, _ = generateSyntheticSites(config, taxonomy)
    agree = np.mean([
        taxonomy.mapDiagnosis(c.panel[0][0].rawName) ==
        taxonomy.mapDiagnosis(c.panel[1][0].rawName) for c in dev])
    assert agree < 0.05


def test_separation_improves_nearest_cluster_accuracy(taxonomy):
    accuracies = []
    for sep in (0.5, 1.5, 3.0, 6.0):
        config = GeneratorConfig(
            dim=16, nDev=400, nSite=1, clusterSeparation=sep, seed=6)
        dev, _ = generateSyntheticSites(config, taxonomy)
        means = SiteModel(config, taxonomy).means
        hits = 0
        for case in dev:
            x = case.imageEmbeddings.mean(axis=0)
            nearest = np.argmin(((x - means) ** 2).sum(axis=1))
            hits += nearest == case.trueCondition
        accuracies.append(hits / len(dev))
    assert accuracies == sorted(accuracies)
    assert accuracies[-1] > accuracies[0]


def test_hot_categories(taxonomy):
    model = SiteModel(GeneratorConfig(seed=5), taxonomy)
    hot = np.isin(taxonomy.categoryIndex, model.hotCategories)
    assert hot.sum() >= 0.25 * taxonomy.numConditions
    assert not (hot & taxonomy.highRiskMask()).any()
    assert model.sitePrior[hot].sum() > 4 * model.devPrior[hot].sum()
    # outside the hot categories both sites keep the same proportions
    cold = ~hot
    np.testing.assert_allclose(
        model.sitePrior[cold] / model.sitePrior[cold].sum(),
        model.devPrior[cold] / model.devPrior[cold].sum())


def test_no_hot_fraction_gives_equal_priors(taxonomy):
    model = SiteModel(GeneratorConfig(hotFraction=0.0), taxonomy)
    assert model.hotCategories == []
    np.testing.assert_allclose(model.sitePrior, model.devPrior)


def test_panel_mostly_names_the_true_condition(smallSites):
    dev, _ = smallSites
    hits = np.mean([r.top1 == c.trueCondition
        for c, r in zip(dev, dev.references())])
    assert hits >= 0.8


def test_unmapped_answer_never_leads(smallSites, taxonomy):
    dev, site = smallSites
    raters = [rater for c in list(dev) + list(site) for rater in c.panel]
    raters += [c.comparator for c in site]
    assert all(taxonomy.mapDiagnosis(r[0].rawName) is not None
        for r in raters)
    unmapped = sum(taxonomy.mapDiagnosis(d.rawName) is None
        for r in raters for d in r)
    assert unmapped > 0


def test_scalar_and_vector_concentration_agree(taxonomy):
    a = SiteModel(GeneratorConfig(dirichletSite=0.3), taxonomy)
    b = SiteModel(GeneratorConfig(dirichletSite=[0.3] * 40), taxonomy)
    np.testing.assert_array_equal(a.sitePrior, b.sitePrior)


@pytest.mark.parametrize('change', [
    dict(noiseSigma=0), dict(patFraction=1.5), dict(dim=0),
    dict(dirichletSite=[1.0, 2.0]), dict(numCategories=50),
    dict(hotFraction=1.0), dict(hotSiteWeight=0), dict(raterSigma=0)])
def test_invalid_config(change):
    with pytest.raises(ConfigError):
        generateSyntheticSites(GeneratorConfig(**change))


def test_taxonomy_size_mismatch(smallConfig):
    with pytest.raises(ConfigError):
        generateSyntheticSites(smallConfig, syntheticTaxonomy(5, 2))
