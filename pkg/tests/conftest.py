import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphmem.retrieval import CorpusItem, Modality, build_corpus

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def demo_items() -> list[CorpusItem]:
    return [
        CorpusItem(
            "doc-director",
            Modality.TEXT,
            "The film Solaris Dawn was directed by Mira Chen.",
        ),
        CorpusItem(
            "doc-year",
            Modality.TEXT,
            "Solaris Dawn premiered in 2019 at the Harbor Film Festival.",
        ),
        CorpusItem(
            "doc-other",
            Modality.TEXT,
            "Blue Harvest is a documentary about deep sea fishing.",
        ),
        CorpusItem(
            "vid-interview",
            Modality.VIDEO,
            "Interview with Mira Chen about directing Solaris Dawn.",
            duration_s=150.0,
            asset_ref="assets/vid-interview.mp4",
        ),
    ]


@pytest.fixture(scope="session")
def toy_corpus():
    return build_corpus(demo_items())


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN
