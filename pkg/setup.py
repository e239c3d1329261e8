import os
import sys
import codecs
from setuptools import setup

if sys.version_info < (3, 8, 0):
    raise RuntimeError("derm_shift requires Python 3.8 or higher")

here = os.path.abspath(os.path.dirname(__file__))
with codecs.open(os.path.join(here, 'README.rst'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='derm_shift',
    version='0.1.0',
    description='Label-shift experiments for case-level skin condition '
        'classifiers',
    long_description=long_description,
    license='BSD',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
        'License :: OSI Approved :: BSD License',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3 :: Only',
    ],
    keywords='dermatology label shift calibration distribution matching',
    packages=['derm_shift'],
    install_requires=['numpy>=1.17', 'scipy>=1.4', 'pandas>=1.0'],
    extras_require={'test': ['pytest']},
    entry_points={
        'console_scripts': ['derm-shift=derm_shift.cli:main']},
)
