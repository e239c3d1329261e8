"""
The end-to-end experiment: generate both sites, train the baseline,
apply every intervention and write the intervention-ladder report.
"""

import asyncio
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List

import numpy as np
import pandas as pd

from derm_shift.objects import Object, ExperimentConfig, ArmResult, \
    MetricResult
from derm_shift.errors import DermShiftError, UnsupportedFitError
from derm_shift.taxonomy import ConditionTaxonomy, defaultTaxonomy
from derm_shift.labels import ReferenceLabel
from derm_shift.dataio import (
    AgeGroups, EfstBands, Dataset, ConditionDistribution,
    conditionDistribution, stratifiedDownsample)
from derm_shift.generator import generateSyntheticSites
from derm_shift.trainer import train
from derm_shift.adapt import (
    mhResample, conditionAwareAugment, randomAugment, stratifiedSplit)
from derm_shift.calibrate import (
    fitTemperatures, expectedCalibrationError, saveCalibration)
from derm_shift.predict import (
    datasetLogits, predictDataset, fitKThreshold, variableKSets,
    highRiskSensitivity)
from derm_shift.evaluate import (
    MetricRow, topkAccuracy, topkFlags, variablekAccuracy, kStats,
    metricResult, comparatorFlags, factorRegression, stratifiedTable,
    writeMetricsCsv, writeRegressionCsv)
import derm_shift.util as util

__all__ = ['ARMS', 'SeedReport', 'ReportBundle', 'Experiment', 'runPipeline']

_logger = logging.getLogger('derm_shift.pipeline')

# (arm id, key, description), in ladder order
ARMS = (
    (0, 'baseline', 'Baseline'),
    (1, 'recal', 'Baseline + score recalibration'),
    (2, 'mhMatched', 'Distribution-matched retrain (MH) + recalibration'),
    (3, 'random', 'Random site augmentation'),
    (4, 'conditionAware', 'Condition-aware site augmentation'),
    (5, 'conditionAwareRecal',
        'Condition-aware site augmentation + score recalibration'),
    (6, 'classifierOnly', 'Condition-aware classifier-only fine-tune'),
    (7, 'classifierOnlyRecal',
        'Condition-aware classifier-only fine-tune + score recalibration'))

# metrics printed as they are rather than as percentages
RAW_METRICS = {'meanK', 'kQ1', 'kQ3', 'kThreshold'}

STRATA_LEVELS = {
    'ambiguity': ReferenceLabel.AmbiguityClasses,
    'sex': ('female', 'male'),
    'ageGroup': AgeGroups,
    'efst': EfstBands,
    'site': ('CLIN', 'PAT')}


class SeedReport(Object):
    """
    Everything computed for one seed. ``status`` is 'ok' or 'failed';
    a failed seed names the ``stage`` and carries the ``error``.
    """
    defaults = {
        'seed': 0,
        'status': 'ok',
        'stage': '',
        'error': '',
        'arms': (),
        'metrics': (),
        'regression': (),
        'ladder': '',
        'files': ()}
    __slots__ = defaults.keys()
    __init__ = Object.__init__


class ReportBundle(Object):
    defaults = {
        'outputDir': '',
        'seedReports': (),
        'summary': None,
        'manifest': None}
    __slots__ = defaults.keys()
    __init__ = Object.__init__

    @property
    def complete(self) -> bool:
        return all(r.status == 'ok' for r in self.seedReports)


def _restrictTarget(target: ConditionDistribution, source: Dataset):
    """
    Drop target mass on labels the source lacks and renormalize.
    """
    labels = source.categories() if target.level == 'category' \
        else source.top1()
    present = np.bincount(labels, minlength=len(target.probs)) > 0
    probs = np.where(present, target.probs, 0.0)
    if probs.sum() < target.probs.sum():
        _logger.warning(
            f'Target mass {1 - probs.sum():.3f} on {target.level} labels '
            'absent from the source was dropped')
    return ConditionDistribution(target.level, probs / probs.sum())


class _SeedRun:
    """
    State of one seed while its stages run; ``stage`` names the
    stage in progress.
    """
    def __init__(self, experiment: 'Experiment', seed):
        self.exp = experiment
        self.cfg = experiment.config
        self.seed = seed
        self.stage = 'init'
        self.dir = os.path.join(self.cfg.outputDir, f'seed-{seed}')
        self.arms: List[ArmResult] = []
        self.metrics: List[MetricRow] = []
        self.regression = []
        self.files = []

    def sub(self, tag):
        return util.subSeed(self.seed, tag)

    def run(self) -> SeedReport:
        cfg = self.cfg
        tax = self.exp.taxonomy
        os.makedirs(self.dir, exist_ok=True)

        self.stage = 'generate'
        dev, site = generateSyntheticSites(
            cfg.generator.copy(seed=self.seed), tax)
        if cfg.siteRetention:
            self.stage = 'downsample'
            site = stratifiedDownsample(
                site, cfg.siteRetention, self.sub('downsample'))

        self.stage = 'split'
        devHold, devTrain = stratifiedSplit(
            dev, cfg.eval.devHoldoutFraction, self.sub('devSplit'))
        calibSet, evalSet = stratifiedSplit(
            site, cfg.calib.calibFraction, self.sub('siteSplit'))
        self.devHold, self.calibSet, self.evalSet = devHold, calibSet, evalSet
        self.evalHash = evalSet.hash()
        self.evalWeights = evalSet.weightArray() \
            if evalSet.weights is not None else None

        self.stage = 'train baseline'
        trainCfg = cfg.train.copy(seed=self.sub('train'))
        baseline = train(devTrain, trainCfg).params
        self.evaluateArm(0, baseline, None)

        self.stage = 'recalibrate baseline'
        self.evaluateArm(1, baseline, self.fitCalibration(baseline, 'recal'))

        self.stage = 'MH retrain'
        target = _restrictTarget(conditionDistribution(
            calibSet, cfg.match.level, weighted=True), devTrain)
        matched = mhResample(
            devTrain, target, cfg.match.nOut or len(devTrain),
            self.sub('mh'), cfg.match.burnIn)
        mhModel = train(matched, trainCfg).params
        self.evaluateArm(2, mhModel, self.fitCalibration(mhModel, 'mhMatched'))

        self.stage = 'random augmentation'
        augCfg = cfg.augment.copy(seed=self.sub('augment'))
        nAdd = augCfg.nAdd if augCfg.nAdd is not None else \
            math.floor(augCfg.poolFraction * len(calibSet) + 0.5)
        randomSet = randomAugment(
            devTrain, calibSet, nAdd, self.sub('randomAugment'))
        self.evaluateArm(3, train(randomSet, trainCfg).params, None)

        self.stage = 'condition-aware augmentation'
        awareSet = conditionAwareAugment(
            devTrain, calibSet, augCfg.copy(nAdd=nAdd))
        awareModel = train(awareSet, trainCfg).params
        self.evaluateArm(4, awareModel, None)
        self.evaluateArm(
            5, awareModel, self.fitCalibration(awareModel, 'conditionAware'))

        self.stage = 'classifier-only fine-tune'
        fineCfg = cfg.finetune.copy(
            mode='classifierOnly', seed=self.sub('finetune'))
        fineModel = train(awareSet, fineCfg, init=baseline).params
        self.evaluateArm(6, fineModel, None)
        self.evaluateArm(
            7, fineModel, self.fitCalibration(fineModel, 'classifierOnly'))
        assert len({a.evalHash for a in self.arms}) == 1, \
            'arms were evaluated on different sets'

        self.stage = 'extra evaluations'
        self.extraEvaluations(baseline, devTrain)

        self.stage = 'factor regression'
        self.factorRegressions(baseline)

        self.stage = 'write'
        return self.write()

    def fitCalibration(self, model, key):
        cfg = self.cfg
        logits = datasetLogits(model, self.calibSet, self.sub('images'))
        calib = fitTemperatures(
            logits, self.calibSet.top1(), self.exp.taxonomy,
            cfg.calib.iterations, cfg.calib.minCategoryCases)
        path = os.path.join(self.dir, f'calibration-{key}.json')
        saveCalibration(calib, path, self.exp.taxonomy)
        self.files.append(path)
        return calib

    def metric(self, name, result: MetricResult, stratum='all'):
        self.metrics.append(MetricRow(
            name, stratum, result.value, result.ciLo, result.ciHi,
            result.n, result.weighted))

    def bootArgs(self):
        ev = self.cfg.eval
        return dict(nBoot=ev.nBoot, level=ev.level, seed=self.sub('bootstrap'))

    def evaluateArm(self, arm, model, calib):
        cfg = self.cfg
        tax = self.exp.taxonomy
        key = ARMS[arm][1]
        imageSeed = self.sub('images')
        probs = predictDataset(model, self.evalSet, calib, imageSeed)
        refs = self.evalSet.references()
        w = self.evalWeights
        results = {}
        for k in cfg.eval.topK:
            results[f'top{k}'] = topkAccuracy(
                probs, refs, k, w, **self.bootArgs())
        th = cfg.threshold
        try:
            devProbs = predictDataset(model, self.devHold, calib, imageSeed)
            kth = fitKThreshold(
                devProbs, self.devHold.references(), tax,
                th.kMin, th.kMax, th.target)
            sets = variableKSets(probs, kth)
            results['variableK'] = variablekAccuracy(
                sets, refs, w, **self.bootArgs())
            meanK, q1, q3 = kStats(sets)
            sens = highRiskSensitivity(sets, refs, tax)
            for name, v in (('meanK', meanK), ('kQ1', q1), ('kQ3', q3),
                    ('highRiskSensitivity', sens), ('kThreshold', kth.threshold)):
                results[name] = MetricResult(v, v, v, len(sets), w is not None)
        except UnsupportedFitError as e:
            _logger.warning(f'Seed {self.seed} arm {arm}: {e}')
        ece = expectedCalibrationError(
            probs, self.evalSet.top1(), cfg.calib.bins, w)
        results['ece'] = MetricResult(ece, ece, ece, len(probs), w is not None)
        for name, result in results.items():
            self.arms.append(
                ArmResult(self.seed, arm, name, result, self.evalHash))
            self.metric(f'{key}/{name}', result)
        _logger.info(
            f'Seed {self.seed} arm {arm} ({key}): ' + ', '.join(
                f'{n} {r.value:.3f}' for n, r in results.items()))
        self.exp._handleEvent('armDone', self.arms[-1])
        if arm == 0:
            self.baselineProbs = probs
        elif arm == 6:
            self.fineProbs = probs

    def extraEvaluations(self, baseline, devTrain):
        cfg = self.cfg
        imageSeed = self.sub('images')
        k = max(cfg.eval.topK)

        probs = predictDataset(baseline, self.devHold, None, imageSeed)
        self.metric(f'devHeldOut/top{k}', topkAccuracy(
            probs, self.devHold.references(), k, **self.bootArgs()))
        self.heldOutThreshold(baseline)

        siteDist = _restrictTarget(conditionDistribution(
            self.calibSet, cfg.match.level, weighted=True), self.devHold)
        devMatched = mhResample(
            self.devHold, siteDist, len(self.devHold),
            self.sub('devMatched'), cfg.match.burnIn)
        probs = predictDataset(baseline, devMatched, None, imageSeed)
        self.metric(f'devMatched/top{k}', topkAccuracy(
            probs, devMatched.references(), k, **self.bootArgs()))

        devDist = _restrictTarget(conditionDistribution(
            devTrain, cfg.match.level), self.evalSet)
        evalMatched = mhResample(
            self.evalSet, devDist, len(self.evalSet),
            self.sub('evalMatched'), cfg.match.burnIn)
        probs = predictDataset(baseline, evalMatched, None, imageSeed)
        self.metric(f'siteMatchedToDev/top{k}', topkAccuracy(
            probs, evalMatched.references(), k, **self.bootArgs()))

        self.dermFlags = comparatorFlags(self.evalSet, k)
        self.metric(f'derm/top{k}', metricResult(
            self.dermFlags, self.evalWeights, **self.bootArgs()))

        strata = self.strata()
        for arm, probs in ((0, self.baselineProbs), (6, self.fineProbs)):
            flags = topkFlags(probs, self.evalSet.references(), k)
            for row in stratifiedTable(
                    flags, strata, self.evalWeights, STRATA_LEVELS,
                    **self.bootArgs()):
                self.metric(f'{ARMS[arm][1]}/top{k}', row.result,
                    f'{row.factor}={row.level}')

    def heldOutThreshold(self, baseline):
        """
        Fit the variable-k threshold on one half of the DEV hold-out
        and measure it on the other half.
        """
        th = self.cfg.threshold
        tax = self.exp.taxonomy
        imageSeed = self.sub('images')
        fitHalf, checkHalf = stratifiedSplit(
            self.devHold, 0.5, self.sub('kSplit'))
        try:
            kth = fitKThreshold(
                predictDataset(baseline, fitHalf, None, imageSeed),
                fitHalf.references(), tax, th.kMin, th.kMax, th.target)
        except UnsupportedFitError as e:
            _logger.warning(f'Seed {self.seed}: no held-out threshold: {e}')
            return
        sets = variableKSets(
            predictDataset(baseline, checkHalf, None, imageSeed), kth)
        meanK, q1, q3 = kStats(sets)
        sens = highRiskSensitivity(sets, checkHalf.references(), tax)
        for name, v in (('highRiskSensitivity', sens), ('meanK', meanK),
                ('kQ1', q1), ('kQ3', q3)):
            self.metric(f'devHeldOut/{name}',
                MetricResult(v, v, v, len(sets), False))

    def strata(self) -> Dict[str, list]:
        ev = self.evalSet
        return {
            'ambiguity': [r.ambiguity for r in ev.references()],
            'sex': [c.demographics.sex for c in ev],
            'ageGroup': [c.demographics.ageGroup for c in ev],
            'efst': [c.demographics.efst for c in ev],
            'site': [c.site for c in ev]}

    def factorRegressions(self, baseline):
        ev = self.evalSet
        tax = self.exp.taxonomy
        k = max(self.cfg.eval.topK)
        design = []
        for c, r in zip(ev, ev.references()):
            row = {
                'ageGroup': c.demographics.ageGroup,
                'sex': c.demographics.sex,
                'efst': c.demographics.efst,
                'ambiguity': r.ambiguity,
                'category': tax.categoryNames[tax.categoryOf(r.top1)],
                'location': c.attrs.anatomicLocation,
                'year': c.attrs.year,
                'quality': 'flagged' if c.attrs.qualityFlags else 'none',
                'site': c.site}
            design.append(row)
        levels = dict(STRATA_LEVELS)
        levels['category'] = tax.categoryNames
        levels['quality'] = ('none', 'flagged')
        subjects = (
            ('AI', topkFlags(self.baselineProbs, ev.references(), k)),
            ('Derm', self.dermFlags))
        for subject, flags in subjects:
            try:
                rows = factorRegression(design, flags, levels=levels)
            except DermShiftError as e:
                _logger.warning(
                    f'Seed {self.seed}: no {subject} regression: {e}')
                continue
            self.regression += [(subject, row) for row in rows]

    def ladder(self) -> str:
        lines = [
            f'Intervention ladder, seed {self.seed}, '
            f'site evaluation set of {len(self.evalSet)} cases',
            '']
        byArm = {}
        for a in self.arms:
            byArm.setdefault(a.arm, {})[a.metric] = a.result
        k = max(self.cfg.eval.topK)
        for arm, key, desc in ARMS:
            res = byArm.get(arm, {})
            parts = []
            for name in (f'top{k}', 'variableK'):
                r = res.get(name)
                if r is not None:
                    parts.append(
                        f'{name} {100 * r.value:5.1f} '
                        f'({100 * r.ciLo:.1f}, {100 * r.ciHi:.1f})')
            if 'ece' in res:
                parts.append(f'ECE {res["ece"].value:.3f}')
            lines.append(f'{arm}  {desc:<66} ' + '  '.join(parts))
        lines.append('')
        for m in self.metrics:
            if m.stratum != 'all' or m.metric.split('/')[0] in \
                    {key for _, key, _ in ARMS}:
                continue
            if m.metric.split('/')[-1] in RAW_METRICS:
                lines.append(f'{m.metric:<28} {m.value:5.2f}')
            else:
                lines.append(
                    f'{m.metric:<28} {100 * m.value:5.1f} '
                    f'({100 * m.ci_lo:.1f}, {100 * m.ci_hi:.1f})')
        return '\n'.join(lines) + '\n'

    def write(self) -> SeedReport:
        metricsPath = os.path.join(self.dir, 'metrics.csv')
        writeMetricsCsv(self.metrics, metricsPath)
        regressionPath = os.path.join(self.dir, 'regression.csv')
        writeRegressionCsv(
            [row for _, row in self.regression], regressionPath,
            subjects=[s for s, _ in self.regression])
        ladderPath = os.path.join(self.dir, 'ladder.txt')
        ladder = self.ladder()
        with open(ladderPath, 'w') as f:
            f.write(ladder)
        self.files += [metricsPath, regressionPath, ladderPath]
        return SeedReport(
            seed=self.seed, arms=tuple(self.arms),
            metrics=tuple(self.metrics),
            regression=tuple(self.regression), ladder=ladder,
            files=tuple(self.files))


class Experiment:
    """
    Runs the intervention ladder for every configured seed.
    Seeds run concurrently on a thread pool of ``maxWorkers``
    threads; arms within a seed run in order.

    Events (set with :meth:`setCallback`):

    * ``seedStarted(seed)``;
    * ``armDone(ArmResult)``: last result row of a finished arm;
    * ``seedDone(SeedReport)``;
    * ``seedFailed(SeedReport)``.
    """
    def __init__(self, config: ExperimentConfig,
            taxonomy: ConditionTaxonomy = None):
        config.validate()
        self.config = config
        gen = config.generator
        self.taxonomy = taxonomy or defaultTaxonomy(
            gen.numConditions, gen.numCategories)
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

    def run(self) -> ReportBundle:
        """
        Run all seeds and write the report; blocks until done.
        """
        return util.run(self.runAsync())

    async def runAsync(self) -> ReportBundle:
        loop = asyncio.get_running_loop()
        os.makedirs(self.config.outputDir, exist_ok=True)
        with ThreadPoolExecutor(self.config.maxWorkers) as pool:
            futures = [
                loop.run_in_executor(pool, self._runSeed, seed)
                for seed in self.config.seeds]
            reports = await asyncio.gather(*futures)
        return self._writeReport(reports)

    def _runSeed(self, seed) -> SeedReport:
        self._handleEvent('seedStarted', seed)
        seedRun = _SeedRun(self, seed)
        try:
            with util.timeit(f'Seed {seed}'):
                report = seedRun.run()
        except Exception as e:
            _logger.exception(
                f'Seed {seed} failed in stage {seedRun.stage!r}')
            report = SeedReport(
                seed=seed, status='failed', stage=seedRun.stage,
                error=f'{e.__class__.__name__}: {e}',
                arms=tuple(seedRun.arms), metrics=tuple(seedRun.metrics),
                files=tuple(seedRun.files))
            self._handleEvent('seedFailed', report)
            return report
        self._handleEvent('seedDone', report)
        return report

    def _writeReport(self, reports) -> ReportBundle:
        out = self.config.outputDir
        names = {arm: desc for arm, _, desc in ARMS}
        summary = pd.DataFrame([{
            'seed': a.seed, 'arm': a.arm, 'arm_name': names[a.arm],
            'metric': a.metric, 'value': a.result.value,
            'ci_lo': a.result.ciLo, 'ci_hi': a.result.ciHi,
            'n': a.result.n, 'weighted': a.result.weighted}
            for r in reports for a in r.arms],
            columns=['seed', 'arm', 'arm_name', 'metric', 'value', 'ci_lo',
                'ci_hi', 'n', 'weighted'])
        summaryPath = os.path.join(out, 'summary.csv')
        summary.to_csv(summaryPath, index=False)
        ladderPath = os.path.join(out, 'ladder.txt')
        with open(ladderPath, 'w') as f:
            f.write('\n'.join(r.ladder for r in reports if r.ladder))
        configPath = os.path.join(out, 'config.json')
        with open(configPath, 'w') as f:
            json.dump(self.config.dict(), f, indent=1, sort_keys=True)

        files = [configPath, summaryPath, ladderPath] + \
            [p for r in reports for p in r.files]
        manifest = {
            'status': 'complete' if all(r.status == 'ok' for r in reports)
                else 'partial',
            'taxonomy_hash': self.taxonomy.hash,
            'seeds': {str(r.seed): {
                'status': r.status, 'stage': r.stage, 'error': r.error}
                for r in reports},
            'artifacts': [{
                'path': os.path.relpath(p, out),
                'sha256': util.fileHash(p)} for p in files]}
        with open(os.path.join(out, 'manifest.json'), 'w') as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        _logger.info(f'Report written to {out} ({manifest["status"]})')
        return ReportBundle(out, tuple(reports), summary, manifest)


def runPipeline(config: ExperimentConfig,
        taxonomy: ConditionTaxonomy = None) -> ReportBundle:
    """
    Run the full experiment; see :class:`Experiment`.
    """
    return Experiment(config, taxonomy).run()
