import json
from pathlib import Path

import numpy as np
import pytest

from app.core.logging import setup_logging
from app.services.caption_parser import load_lexicon

FIXTURES = Path(__file__).parent / "fixtures"

setup_logging("WARNING")


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="session")
def gold_captions():
    with (FIXTURES / "captions_gold.jsonl").open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
