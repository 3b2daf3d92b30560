import os
from setuptools import setup, find_packages

# Read the contents of README file
with open(os.path.join(os.path.dirname(__file__), 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name="rosguard",
    version="0.2.0",
    description="Robust CUSUM change detection for linear measurement systems with uncertain models",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=['rosguard', 'rosguard.*']),
    include_package_data=True,
    package_data={'rosguard.tests': ['fixtures/*.json', 'fixtures/*.txt']},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.23",
        "scipy>=1.9",
        "cvxpy>=1.4",
        "clarabel>=0.6",
        "pandas>=1.5",
        "pydantic>=2.0",
    ],
    extras_require={
        "test": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            "rosguard=rosguard.cli:main",
        ],
    },
    keywords="change detection, cusum, robust optimization, false data injection",
)
