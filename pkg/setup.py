from setuptools import find_packages, setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

version = {}
with open("posterlab/version.py") as fp:
    exec(fp.read(), version)

requirements = [requirement.strip() for requirement in open("requirements.txt").readlines()]

info = {
    "name": "posterlab",
    "version": version["__version__"],
    "packages": find_packages(exclude=["tests"]),
    "license": "Apache License 2.0",
    "description": "Desk-scale poster inpainting with a rectified-flow transformer and character position encoding",
    "long_description": long_description,
    "long_description_content_type": "text/markdown",
    "classifiers": [
        "Development Status :: 3 - Alpha",
        "Environment :: Console",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    "python_requires": ">=3.9",
    "install_requires": requirements,
    "extras_require": {"test": ["pytest"]},
    "entry_points": {"console_scripts": ["posterlab=posterlab.cli:main"]},
}

setup(**(info))
