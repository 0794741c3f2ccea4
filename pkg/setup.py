from setuptools import setup, find_packages

setup(
    name="second-order-pruning-reference",
    version="0.1",
    packages=find_packages(),
    package_data={"src.pruning": ["data/tiny_corpus.txt"]},
)
