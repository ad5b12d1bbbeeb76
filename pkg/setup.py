#!/usr/bin/env python3
#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import os
import sys
from setuptools import setup, find_packages

PACKAGE_NAME = 'scene3d_llm_tool'

SOURCE_DIR = os.path.abspath(os.path.dirname(__file__))

sys.path.append(os.path.join(SOURCE_DIR, PACKAGE_NAME))
from version import __version__

assert sys.version_info[0] == 3, 'Python 3 is required'

with open("README.md", "r", encoding = "utf-8") as fh:
    long_description = fh.read()

args = dict(
    name=PACKAGE_NAME,
    version='.'.join(map(str, __version__)),
    packages=find_packages(exclude=['tests', 'tests.*']),
    install_requires=[
        'setuptools>=18.5',
        'pyyaml>=5.1',
        'numpy',
        'requests',
        'nltk',
        'rouge-score',
        'pycocoevalcap',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            '{0}={0}.main:main'.format(PACKAGE_NAME),
        ]
    },
    include_package_data=True,

    # Meta fields, they have no technical meaning
    description='3D scene feature extraction, location tokens and 3D-language data generation',
    long_description = long_description,
    long_description_content_type = "text/markdown",
    author='scene3d_llm_tool developers',
    license='MIT',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Intended Audience :: Developers',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Environment :: Console',
    ],
    package_data={PACKAGE_NAME: ['datagen/templates/*.yaml', 'navmaps/*.json']}
)

setup(**args)
