import sys

if sys.version_info < (3, 8, 0):
    print("Python 3.8.0 or higher is required")
    sys.exit()

try:
    import numpy
    import scipy
except ImportError:
    print('numpy and scipy are required')
    sys.exit()


from .errors import *
from .objects import *
from .taxonomy import *
from .labels import *
from .dataio import *
from .generator import *
from .encoder import *
from .trainer import *
from .adapt import *
from .calibrate import *
from .predict import *
from .evaluate import *
from .pipeline import *
from . import util

__version__ = '0.1.0'

__all__ = ['util']
for _m in (errors, objects, taxonomy, labels, dataio, generator, encoder,
        trainer, adapt, calibrate, predict, evaluate, pipeline):
    __all__ += _m.__all__
