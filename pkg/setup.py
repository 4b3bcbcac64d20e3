"""
dlsim — Setup Configuration

Kept for older pip versions; pyproject.toml is the primary configuration.
"""

from setuptools import setup, find_packages
from pathlib import Path

readme = Path("README.md")
long_description = readme.read_text(encoding="utf-8") if readme.exists() else ""

setup(
    name="dlsim",
    version="0.1.0",
    description="Deterministic decentralized-learning simulator with privacy attacks and defenses",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests*", "examples*"]),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.22",
        "networkx>=2.8",
        "scipy>=1.8",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "dlsim=dlsim.cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Security",
    ],
    keywords="decentralized-learning gossip federated-learning privacy membership-inference simulation",
    license="MIT",
)
