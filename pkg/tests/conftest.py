import numpy as np
import pytest

from redash.engine import GarblingContext
from redash.gadgets import decode_planes, encode_planes

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def ctx():
    return GarblingContext(b"test-seed", lam=16)


def run_gadget(gadget, values, probes=None):
    """Encode integer ``values`` on the gadget inputs, evaluate, decode outputs per modulus."""
    from redash.gadgets import evaluate_gadget

    sec = gadget.secrets
    labels = encode_planes(sec.inputs, sec.offsets, np.asarray(values))
    out = evaluate_gadget(gadget, labels, probes)
    return decode_planes(sec.outputs, sec.offsets, out)
