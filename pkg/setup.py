# (c) 2016-2020 Anaconda, Inc. / http://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

import re

import setuptools


def get_version():
    with open("stv/__init__.py") as fi:
        return re.search(r"__version__ = '([^']+)'", fi.read()).group(1)


setuptools.setup(
    name="stv",
    version=get_version(),
    author="Anaconda, Inc.",
    author_email="conda@anaconda.com",
    license="BSD",
    description="still-to-video face recognition networks on synthetic data",
    long_description=open("README.md").read(),
    packages=["stv"],
    entry_points={
        "console_scripts": ["stv = stv.main:main"],
    },
    python_requires=">=3.6",
    install_requires=[
        "numpy >=1.17",
        "opencv-python-headless",
        "pillow >=3.1",
        "pyyaml",
        "jinja2",
    ],
    extras_require={
        "test": ["pytest", "pytest-cov"],
    },
)
