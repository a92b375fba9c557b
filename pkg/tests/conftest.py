import json
from importlib import resources

import pytest

from fedmem.config import parse_config
from fedmem.corpus import read_corpus_jsonl
from fedmem.inference import read_queries_jsonl
from fedmem.llmclient import ScriptedBackend
from fedmem.pipeline import build_local


def fixture_text(name: str) -> str:
    return resources.files("fedmem.data").joinpath(name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def app_config():
    return parse_config(json.loads(fixture_text("fixture_config.json")))


@pytest.fixture(scope="session")
def fixture_docs():
    return read_corpus_jsonl(str(resources.files("fedmem.data").joinpath("fixture_corpus.jsonl")))


@pytest.fixture(scope="session")
def fixture_queries():
    return read_queries_jsonl(str(resources.files("fedmem.data").joinpath("fixture_queries.jsonl")))


@pytest.fixture(scope="session")
def backend():
    return ScriptedBackend()


@pytest.fixture(scope="session")
def fixture_build(app_config, fixture_docs, backend):
    """Single-silo build over the bundled corpus; shared across tests."""
    return build_local(fixture_docs, app_config.build_config(), backend)
