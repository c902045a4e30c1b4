#!/usr/bin/env python3
"""
Setup script for Fork-Join Lab
"""

from setuptools import setup, find_packages
import os

# Read the README file
def read_readme():
    readme_path = os.path.join(os.path.dirname(__file__), 'README.md')
    if os.path.exists(readme_path):
        with open(readme_path, 'r', encoding='utf-8') as f:
            return f.read()
    return "Simulation and verification laboratory for limited fork-join queues"

# Read requirements
def read_requirements(name='requirements.txt'):
    requirements_path = os.path.join(os.path.dirname(__file__), name)
    if os.path.exists(requirements_path):
        with open(requirements_path, 'r', encoding='utf-8') as f:
            return [line.strip() for line in f if line.strip() and not line.startswith('#')]
    return []

setup(
    name="forkjoin-lab",
    version="1.0.0",
    author="Fork-Join Lab Team",
    author_email="",
    description="Simulation and verification laboratory for limited fork-join queues",
    long_description=read_readme(),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["src", "src.*"]),
    py_modules=["forkjoin_lab"],
    classifiers=[
        "Development Status :: 5 - Production/Stable",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={"test": read_requirements('requirements-test.txt')},
    entry_points={
        "console_scripts": [
            "forkjoin=src.main:main",
        ],
    },
    keywords="queueing fork-join simulation tail-latency association",
)
