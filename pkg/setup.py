import os

from setuptools import find_packages, setup

DESCRIPTION = (
    "Temporally disentangled representation learning: synthetic latent "
    "processes, a modular sequential VAE and identifiability diagnostics"
)

PROJECT_ROOT = os.path.abspath(os.path.dirname(__file__))
try:
    with open(os.path.join(PROJECT_ROOT, "README.md"), encoding="utf-8") as f:
        long_description = "\n" + f.read()
except OSError:
    long_description = DESCRIPTION

version = {}
with open(os.path.join(PROJECT_ROOT, "src", "tdrl", "_version.py")) as f:
    exec(f.read(), version)

setup(
    name="tdrl",
    version=version["__version__"],
    description=DESCRIPTION,
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="MIT",
    python_requires=">=3.9",
    install_requires=[
        "attrs>=18.0.0",
        "scantree>=0.0.4",
        "numpy>=1.22",
        "scipy>=1.8",
        "torch>=1.13",
        "scikit-learn>=1.0",
        "matplotlib>=3.5",
    ],
    packages=find_packages("src"),
    package_dir={"": "src"},
    include_package_data=True,
    entry_points={"console_scripts": ["tdrl=tdrl.cli:main"]},
    tests_require=["pytest", "pytest-cov", "pre-commit"],
)
