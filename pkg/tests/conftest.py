import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mechlang.compiler import compile_document
from mechlang.kb import builtin_corpus, corpus_text


@pytest.fixture(scope="session")
def corpus_docs():
    return {doc.file: doc for doc in builtin_corpus()}


@pytest.fixture(scope="session")
def corpus_texts():
    return {
        name: corpus_text(name)
        for name in ("water.mech", "tank.mech", "vehicle.mech", "traffic.mech")
    }


@pytest.fixture(scope="session")
def compiled_corpus(corpus_docs):
    out = {}
    for name, doc in corpus_docs.items():
        result = compile_document(doc)
        assert result.ok, f"{name}: {[d.render() for d in result.diagnostics]}"
        out[name] = result.model
    return out
