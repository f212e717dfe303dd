import contextlib
import ctypes
import ctypes.util
import random

import numpy as np
import pytest

from zklora.commitments import commit_rows, pedersen_key
from zklora.field import DEFAULT_PROFILE
from zklora.quantizer import delta_exact, quantize
from zklora.tensorio import LoraModule


def _load_sodium():
    name = ctypes.util.find_library("sodium")
    if not name:
        return None
    try:
        lib = ctypes.CDLL(name)
    except OSError:
        return None
    if lib.sodium_init() < 0 or not hasattr(lib, "crypto_core_ristretto255_add"):
        return None
    return lib


@pytest.fixture(scope="session")
def sodium():
    lib = _load_sodium()
    if lib is None:
        pytest.skip("libsodium with ristretto255 not available")
    return lib


@pytest.fixture(scope="session")
def profile():
    return DEFAULT_PROFILE


class Instance:
    """A committed module plus one honest witness."""

    def __init__(self, n, r, d, m, seed=0, module_id=0, profile=DEFAULT_PROFILE):
        rng = np.random.default_rng(seed)
        f = profile.scale_bits
        self.profile = profile
        self.module = LoraModule(module_id, f"{module_id}.proj", n, r, d, f, f"A.{module_id}", f"B.{module_id}")
        self.A = rng.uniform(-1, 1, (r, n)).astype(np.float32)
        self.B = rng.uniform(-1, 1, (d, r)).astype(np.float32)
        self.X = rng.uniform(-1, 1, (n, m)).astype(np.float32)
        self.A_q, self.B_q, self.X_q = quantize(self.A, f), quantize(self.B, f), quantize(self.X, f)
        self.D_q = delta_exact(self.A_q, self.B_q, self.X_q)
        self.key = pedersen_key(profile, max(n, r))
        crng = random.Random(seed)
        self.ca = commit_rows(self.A_q, self.key, crng)
        self.cb = commit_rows(self.B_q, self.key, crng)
        self.session_id = rng.bytes(16)


@pytest.fixture
def make_instance():
    return Instance


@contextlib.contextmanager
def serving(contributor):
    """A loopback contributor server for the duration of the block."""
    from zklora.mpi.server import start_contributor

    server = start_contributor(contributor)
    try:
        yield server.address
    finally:
        server.shutdown()
        server.server_close()


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
