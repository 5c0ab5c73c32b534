import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _quiet_batchnorm_warning(caplog):
    caplog.set_level(logging.ERROR, logger="lambdakws.tensor")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Synthetic corpus with every word, a handful of clips each."""
    from lambdakws.dataset import ALL_WORDS, CORE_WORDS
    from lambdakws.synth import make_corpus

    root = tmp_path_factory.mktemp("corpus")
    make_corpus(root, clips_per_word={w: (12 if w in CORE_WORDS else 3) for w in ALL_WORDS}, seed=11, speakers=60)
    return root
