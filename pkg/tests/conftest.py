"""Shared fixtures: small generated corpora and their parsed configs."""

import pytest

from featurebox.corpus import gen_corpus
from featurebox.pipeline import load_config


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two-view corpus, small enough for sub-second pipeline runs."""
    dest = tmp_path_factory.mktemp("corpus2v")
    return gen_corpus(dest, rows=2_000, users=300, seed=7)


@pytest.fixture(scope="session")
def small_config(small_corpus):
    return load_config(small_corpus["config"])


@pytest.fixture(scope="session")
def single_view_corpus(tmp_path_factory):
    """One-view corpus: clean -> extract -> merge, no join stage."""
    dest = tmp_path_factory.mktemp("corpus1v")
    return gen_corpus(dest, rows=1_200, users=200, seed=11, views=1)


@pytest.fixture(scope="session")
def single_view_config(single_view_corpus):
    return load_config(single_view_corpus["config"])
