from pathlib import Path

import numpy as np
import pytest

from hmtlrec import autograd as ag
from hmtlrec.data import ItemRecord, build_catalog
from hmtlrec.encoder import EncoderConfig
from hmtlrec.model import Recommender

SAMPLE_DIR = Path(__file__).resolve().parents[1] / "src" / "hmtlrec" / "sample"


@pytest.fixture
def small_catalog():
    """30 items, two levels (5 and 3 categories), a few without labels or titles."""
    records = []
    for i in range(30):
        cats = (f"a{i % 5}", f"b{i % 3}") if i % 11 else ()
        records.append(ItemRecord(f"it{i}", cats, f"Word{i % 4} shared" if i % 7 else ""))
    return build_catalog(records, 2, metadata_vocab=64)


@pytest.fixture
def small_model(small_catalog):
    catalog, taxonomy = small_catalog
    with ag.precision(np.float64):
        return Recommender(catalog, taxonomy, EncoderConfig(8, 8, 8, layers=2, heads=4, max_len=6), seed=3)


@pytest.fixture
def sample_dir():
    return SAMPLE_DIR


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
