import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agentsearch.model import Corpus, Document, QAExample


@pytest.fixture
def tiny_corpus() -> Corpus:
    return Corpus([
        Document(id="d1", text="alpha beta gamma delta", title="first"),
        Document(id="d2", text="beta gamma epsilon", title="second"),
        Document(id="d3", text="zeta eta theta alpha alpha", title="third"),
    ])


@pytest.fixture
def tiny_qa() -> QAExample:
    return QAExample(id="qa1", question="what links alpha and beta?",
                     answer="gamma", evidence=("d1", "d2"))
