#!/usr/bin/env python
from setuptools import setup, find_packages
from os import path

here = path.abspath(path.dirname(__file__))

with open(path.join(here, 'requirements.txt')) as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith('pytest')]

setup(
    name='morphkit',
    version='0.1.0',
    description='Multi-view face scan fusion, template registration, morphable model and benchmark',
    packages=find_packages(exclude=['tests', 'scripts']),
    python_requires='>=3.8',
    install_requires=requirements,
    entry_points={'console_scripts': ['morphkit=morphkit.cli:main']},
)
