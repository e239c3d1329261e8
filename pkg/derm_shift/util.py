import asyncio
import hashlib
import json
import logging
import math
import time
import zlib

import numpy as np

from derm_shift.objects import Object

_logger = logging.getLogger('derm_shift.util')


def df(objs, labels=None):
    """
    Create pandas DataFrame from the sequence of same-type objects.
    When a list of labels is given then only retain those labels and
    drop the rest.
    """
    import pandas as pd
    if objs:
        objs = list(objs)
        obj = objs[0]
        if isinstance(obj, Object):
            df = pd.DataFrame.from_records(o.tuple() for o in objs)
            df.columns = list(obj.__class__.defaults)
        else:
            df = pd.DataFrame.from_records(objs)
        if isinstance(obj, tuple) and hasattr(obj, '_fields'):
            # assume it's a namedtuple
            df.columns = obj.__class__._fields
    else:
        df = None
    if labels and df is not None:
        df = df[[label for label in df if label in labels]]
    return df


def filterRootLog(record):
    """
    Filter log records on the root logger.
    """
    return record.name != 'root'


def _addHandler(handler, level):
    logger = logging.getLogger()
    logger.setLevel(level)
    formatter = logging.Formatter(
            '%(asctime)s %(name)s %(levelname)s %(message)s')
    handler.setFormatter(formatter)
    handler.addFilter(filterRootLog)
    logger.addHandler(handler)
    return handler


def logToFile(path, level=logging.INFO):
    """
    Create a log handler that logs to the given file.
    """
    return _addHandler(logging.FileHandler(path), level)


def logToConsole(level=logging.INFO):
    """
    Create a log handler that logs to the console.
    """
    return _addHandler(logging.StreamHandler(), level)


def formatSI(n):
    """
    Format the integer or float n to 3 significant digits + SI prefix.
    """
    s = ''
    if n < 0:
        n = -n
        s += '-'
    if type(n) is int and n < 1000:
        s = str(n) + ' '
    elif n < 1e-22:
        s = '0.00 '
    else:
        assert n < 9.99e26
        log = int(math.floor(math.log10(n)))
        i, j = divmod(log, 3)
        for _try in range(2):
            templ = '%.{}f'.format(2 - j)
            val = templ % (n * 10 ** (-3 * i))
            if val != '1000':
                break
            i += 1
            j = 0
        s += val + ' '
        if i != 0:
            s += 'yzafpnm kMGTPEZY'[i + 7]
    return s


class timeit:
    """
    Context manager for timing.
    """
    def __init__(self, title='Run'):
        self.title = title

    def __enter__(self):
        self.t0 = time.time()

    def __exit__(self, *_args):
        _logger.info(
            self.title + ' took ' + formatSI(time.time() - self.t0) + 's')


def syncAwait(future):
    """
    Synchronously wait until future is done. A fresh event loop is
    used when none is running in this thread.
    """
    try:
        loop = asyncio.get_running_loop()
    except RuntimeError:
        loop = None
    if loop is None:
        return asyncio.run(_wrap(future))
    raise RuntimeError(
        'syncAwait called from a running event loop, await instead')


async def _wrap(future):
    return await future


def run(*awaitables):
    """
    Run the awaitables (coroutines or futures) until each has completed
    and return their results.
    """
    if len(awaitables) == 1:
        return syncAwait(awaitables[0])
    return syncAwait(_gather(*awaitables))


async def _gather(*awaitables):
    return await asyncio.gather(*awaitables)


def _tagInt(tag):
    if isinstance(tag, str):
        return zlib.crc32(tag.encode())
    return int(tag)


def rng(seed, *tags) -> np.random.Generator:
    """
    Seeded random generator for the stream identified by the seed
    and optional tags (strings or integers). Equal arguments give
    bit-identical streams.
    """
    return np.random.default_rng([_tagInt(seed)] + [_tagInt(t) for t in tags])


def subSeed(seed, *tags) -> int:
    """
    Derive an unsigned 64-bit seed from a seed and tags.
    """
    ss = np.random.SeedSequence([_tagInt(seed)] + [_tagInt(t) for t in tags])
    return int(ss.generate_state(1, np.uint64)[0])


def canonicalJson(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def sha256(data) -> str:
    """
    SHA-256 hex digest of bytes, a string or a JSON-serializable object.
    """
    if isinstance(data, str):
        data = data.encode()
    elif not isinstance(data, (bytes, bytearray)):
        data = canonicalJson(data).encode()
    return hashlib.sha256(data).hexdigest()


def fileHash(path) -> str:
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            h.update(chunk)
    return h.hexdigest()
