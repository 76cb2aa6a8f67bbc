import json
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from simflash.chip import ChipGeometry
from simflash.controller import Controller
from simflash.layout import split_chunks
from simflash import reliability

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")

settings.register_profile("default", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = ChipGeometry(channels=2, dies=2, blocks=4, pages_per_block=8)


def golden(name):
    with open(os.path.join(GOLDEN, name)) as f:
        return json.load(f)


def small_controller(provisioned=16, **kw):
    return Controller(SMALL, provisioned=provisioned, **kw)


def page_of(words):
    """4096-byte page from up to 512 ints (rest filled with all-ones)."""
    w = list(words) + [(1 << 64) - 1] * (512 - len(words))
    return np.array(w, dtype=np.uint64).astype(">u8").tobytes()


def stored(chip, addr, logical, now=0, config=reliability.DEFAULT_CONFIG):
    chip.pages[addr] = reliability.build_page_image(split_chunks(logical), chip.ppn(addr), now,
                                                    config)
    return chip.pages[addr]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion -> (passed, detail), filled by test_acceptance and echoed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: [int(x) if x.isdigit() else x
                                                   for x in n.replace("(", " ").split()]):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {name}: {detail}")
