from setuptools import setup, find_packages


base_packages = ["numpy>=1.19", "torch>=1.13"]

test_packages = [
    "pytest>=5.4.3",
    "hypothesis>=6.0",
    "black>=19.10b0",
    "flake8>=3.8.3",
]

llm_packages = ["openai>=1.0"]

docs_packages = [
    "mkdocs>=1.1",
    "mkdocs-material>=4.6.3",
    "mkdocstrings>=0.8.0",
]

dev_packages = test_packages + llm_packages + docs_packages

setup(
    name="crossrec",
    version="0.1.0",
    packages=find_packages(include=["crossrec", "crossrec.*"]),
    install_requires=base_packages,
    extras_require={
        "dev": dev_packages,
        "test": test_packages,
        "docs": docs_packages,
        "llm": llm_packages,
    },
    entry_points={"console_scripts": ["crossrec = crossrec.cli:main"]},
)
