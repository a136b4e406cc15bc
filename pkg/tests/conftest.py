import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import build_planted  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def planted():
    log = logging.getLogger("geolist")
    level = log.level
    log.setLevel(logging.ERROR)  # training is chatty at INFO/WARNING
    try:
        return build_planted()
    finally:
        log.setLevel(level)
