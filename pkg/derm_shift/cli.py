"""
Command line interface::

    derm-shift generate  --config exp.json --out data
    derm-shift train     --data data/dev.jsonl --taxonomy data/taxonomy.json
    derm-shift calibrate --model model.json --data calib.jsonl ...
    derm-shift adapt     split --data data/site.jsonl ...
    derm-shift predict   --model model.json --data eval.jsonl --fit-on dev.jsonl
    derm-shift evaluate  --model model.json --data eval.jsonl
    derm-shift pipeline  --config exp.json --out report
"""

import argparse
import json
import logging
import os
import sys

from derm_shift.objects import ExperimentConfig
from derm_shift.errors import (
    DermShiftError, ConfigError, DataError, PartialCompletionError)
from derm_shift.taxonomy import loadTaxonomy, saveTaxonomy, defaultTaxonomy
from derm_shift.dataio import (
    loadDataset, saveDataset, conditionDistribution)
from derm_shift.generator import generateSyntheticSites
from derm_shift.trainer import train, saveModel, loadModel
from derm_shift.adapt import (
    mhResample, conditionAwareAugment, randomAugment, stratifiedSplit)
from derm_shift.calibrate import (
    fitTemperatures, loadCalibration, saveCalibration,
    expectedCalibrationError)
from derm_shift.predict import (
    KThreshold, datasetLogits, predictDataset, fitKThreshold,
    variableKSets, writePredictions)
from derm_shift.evaluate import (
    MetricRow, topkAccuracy, variablekAccuracy, metricResult,
    comparatorFlags, writeMetricsCsv)
from derm_shift.pipeline import Experiment
import derm_shift.util as util

__all__ = ['main', 'loadConfig']

_logger = logging.getLogger('derm_shift.cli')


def loadConfig(path=None) -> ExperimentConfig:
    """
    Experiment config from a JSON file, or the defaults without one.
    """
    if not path:
        return ExperimentConfig()
    try:
        with open(path) as f:
            d = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f'Cannot read config {path}: {e}')
    if not isinstance(d, dict):
        raise ConfigError(f'Config {path} is not a JSON object')
    return ExperimentConfig.fromDict(d)


def _taxonomy(args, config):
    if args.taxonomy:
        return loadTaxonomy(args.taxonomy)
    gen = config.generator
    return defaultTaxonomy(gen.numConditions, gen.numCategories)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmdGenerate(args, config):
    gen = config.generator
    if args.seed is not None:
        gen.seed = args.seed
    tax = _taxonomy(args, config)
    dev, site = generateSyntheticSites(gen, tax)
    saveTaxonomy(tax, _out(args, 'taxonomy.json'))
    saveDataset(dev, _out(args, 'dev.jsonl'))
    saveDataset(site, _out(args, 'site.jsonl'))


def cmdTrain(args, config):
    cfg = config.finetune if args.init else config.train
    if args.seed is not None:
        cfg.seed = args.seed
    tax = _taxonomy(args, config)
    data = loadDataset(args.data, tax)
    init = loadModel(args.init, tax) if args.init else None
    result = train(data, cfg, init)
    saveModel(result.params, _out(args, 'model.json'), cfg, tax.hash)
    if result.lossTrace:
        util.df(result.lossTrace).to_csv(_out(args, 'loss.csv'), index=False)


def cmdCalibrate(args, config):
    tax = _taxonomy(args, config)
    data = loadDataset(args.data, tax)
    model = loadModel(args.model, tax)
    seed = args.seed or 0
    calib = fitTemperatures(
        datasetLogits(model, data, seed), data.top1(), tax,
        config.calib.iterations, config.calib.minCategoryCases)
    saveCalibration(calib, _out(args, 'calibration.json'), tax)


def cmdAdapt(args, config):
    tax = _taxonomy(args, config)
    data = loadDataset(args.data, tax)
    seed = args.seed if args.seed is not None else 0
    if args.method == 'split':
        calib, ev = stratifiedSplit(data, config.calib.calibFraction, seed)
        saveDataset(calib, _out(args, 'calib.jsonl'))
        saveDataset(ev, _out(args, 'eval.jsonl'))
        return
    if not args.pool:
        raise ConfigError(f'adapt {args.method} needs --pool')
    pool = loadDataset(args.pool, tax)
    if args.method == 'mh':
        match = config.match
        target = conditionDistribution(pool, match.level, weighted=True)
        out = mhResample(
            data, target, match.nOut or len(data), seed, match.burnIn)
    elif args.method == 'augment':
        out = conditionAwareAugment(
            data, pool, config.augment.copy(seed=seed))
    else:
        aug = config.augment
        nAdd = aug.nAdd if aug.nAdd is not None else \
            int(aug.poolFraction * len(pool) + 0.5)
        out = randomAugment(data, pool, nAdd, seed)
    saveDataset(out, _out(args, 'adapted.jsonl'))


def _calibration(args, tax):
    return loadCalibration(args.calibration, tax) if args.calibration \
        else None


def cmdPredict(args, config):
    tax = _taxonomy(args, config)
    model = loadModel(args.model, tax)
    calib = _calibration(args, tax)
    data = loadDataset(args.data, tax)
    seed = args.seed or 0
    th = config.threshold
    if args.threshold is not None:
        kth = KThreshold(args.threshold, th.kMin, th.kMax, th.target)
    elif args.fit_on:
        dev = loadDataset(args.fit_on, tax)
        kth = fitKThreshold(
            predictDataset(model, dev, calib, seed), dev.references(), tax,
            th.kMin, th.kMax, th.target)
    else:
        raise ConfigError('predict needs --threshold or --fit-on')
    kth.validate(tax.numConditions)
    sets = variableKSets(predictDataset(model, data, calib, seed), kth)
    writePredictions(_out(args, 'predictions.jsonl'), data, sets)


def cmdEvaluate(args, config):
    tax = _taxonomy(args, config)
    model = loadModel(args.model, tax)
    calib = _calibration(args, tax)
    data = loadDataset(args.data, tax)
    seed = args.seed or 0
    ev = config.eval
    boot = dict(nBoot=ev.nBoot, level=ev.level, seed=seed)
    w = data.weightArray() if data.weights is not None else None
    probs = predictDataset(model, data, calib, seed)
    refs = data.references()
    rows = []

    def add(name, r):
        rows.append(MetricRow(
            name, 'all', r.value, r.ciLo, r.ciHi, r.n, r.weighted))

    for k in ev.topK:
        add(f'top{k}', topkAccuracy(probs, refs, k, w, **boot))
    if args.threshold is not None:
        th = config.threshold
        kth = KThreshold(args.threshold, th.kMin, th.kMax, th.target)
        add('variableK', variablekAccuracy(
            variableKSets(probs, kth.validate(tax.numConditions)),
            refs, w, **boot))
    if any(c.comparator for c in data):
        add(f'derm/top{max(ev.topK)}', metricResult(
            comparatorFlags(data, max(ev.topK)), w, **boot))
    ece = expectedCalibrationError(probs, data.top1(), config.calib.bins, w)
    rows.append(MetricRow('ece', 'all', ece, ece, ece, len(data), w is not None))
    writeMetricsCsv(rows, _out(args, 'metrics.csv'))
    for r in rows:
        print(f'{r.metric:<16} {r.value:.4f} ({r.ci_lo:.4f}, {r.ci_hi:.4f})')


def cmdPipeline(args, config):
    if args.seed is not None:
        config.seeds = (args.seed,)
    config.outputDir = args.out
    bundle = Experiment(config, _taxonomy(args, config)).run()
    if not bundle.complete:
        raise PartialCompletionError(
            'Some seeds failed: ' + ', '.join(
                f'{r.seed} ({r.stage})' for r in bundle.seedReports
                if r.status != 'ok'))


def makeParser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config (JSON)')
    common.add_argument('--seed', type=int, help='override the seed')
    common.add_argument('--out', default=None, help='output directory')
    common.add_argument('--log', help='also log to this file')
    common.add_argument('--taxonomy', help='taxonomy JSON')
    common.add_argument('-v', '--verbose', action='store_true')

    parser = argparse.ArgumentParser(
        prog='derm-shift',
        description='Label-shift experiments for case-level '
            'skin condition classifiers')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', parents=[common],
        help='generate the synthetic DEV and site datasets')
    p.set_defaults(func=cmdGenerate)

    p = sub.add_parser('train', parents=[common], help='train a model')
    p.add_argument('--data', required=True)
    p.add_argument('--init', help='model to fine-tune (classifier only)')
    p.set_defaults(func=cmdTrain)

    p = sub.add_parser('calibrate', parents=[common],
        help='fit per-category temperatures')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.set_defaults(func=cmdCalibrate)

    p = sub.add_parser('adapt', parents=[common],
        help='resample, augment or split a dataset')
    p.add_argument('method', choices=['mh', 'augment', 'random', 'split'])
    p.add_argument('--data', required=True)
    p.add_argument('--pool', help='site dataset (target for mh)')
    p.set_defaults(func=cmdAdapt)

    for name, func, hlp in (
            ('predict', cmdPredict, 'write variable-k predictions'),
            ('evaluate', cmdEvaluate, 'compute accuracy metrics')):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument('--model', required=True)
        p.add_argument('--data', required=True)
        p.add_argument('--calibration')
        p.add_argument('--threshold', type=float)
        if name == 'predict':
            p.add_argument('--fit-on', help='dataset to fit the k threshold')
        p.set_defaults(func=func)

    p = sub.add_parser('pipeline', parents=[common],
        help='run the full intervention ladder')
    p.set_defaults(func=cmdPipeline)
    return parser


def main(argv=None) -> int:
    args = makeParser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    util.logToConsole(level)
    if args.log:
        util.logToFile(args.log, level)
    try:
        config = loadConfig(args.config)
        if args.out is None:
            args.out = config.outputDir if args.command == 'pipeline' else '.'
        args.func(args, config)
    except DermShiftError as e:
        _logger.error(f'{args.command} failed: {e}')
        return e.exitCode
    except OSError as e:
        _logger.error(f'{args.command} failed: {e}')
        return DataError.exitCode
    return 0


if __name__ == '__main__':
    sys.exit(main())
