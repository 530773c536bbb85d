from pathlib import Path
from setuptools import setup, find_packages

with open("README.md") as fp:
    long_description = fp.read()

with Path("tseq", "__init__.py").open() as fp:
    version = None
    for line in fp:
        if line.startswith("__version__"):
            version = line.split("=")[1].strip().strip('"')
    if version is None:
        raise ValueError("Could not read version from __init__.py")

setup(
    name="tseq",
    version=version,
    description="Task-sequencing optimisation with prior-fitted transformers.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["tseq", "tseq.*"]),
    python_requires=">=3.8",
    install_requires=["numpy>=1.22", "scipy>=1.7", "networkx", "pyyaml", "bottleneck"],
    extras_require={"tests": ["pytest", "hypothesis"]},
    entry_points={"console_scripts": ["tseq=tseq.__main__:main"]},
)
