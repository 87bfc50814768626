#!/usr/bin/env python

from setuptools import setup

setup(
    name='hyperzoo',
    version='0.1.0',
    description='Model zoos and self-supervised hyper-representations',
    packages=['scripts', 'scripts.modules', 'scripts.develNet'],
    install_requires=['numpy>=1.20', 'scipy>=1.6', 'matplotlib>=3.3'],
    python_requires='>=3.8',
    entry_points={
        'console_scripts': ['hyperzoo=scripts.hyperZoo:main'],
    },
)
