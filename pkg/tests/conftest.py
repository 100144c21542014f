import functools

import numpy as np
import pytest

from mono_eit.coefficients import MatrixField
from mono_eit.fem import build_basis
from mono_eit.mesh import build_disk_mesh


@functools.lru_cache(maxsize=None)
def disk_mesh(h, radius=1.0):
    return build_disk_mesh(radius, h)


@functools.lru_cache(maxsize=None)
def disk_basis(h, K):
    return build_basis(disk_mesh(h), K)


def identity_field(mesh, scale=1.0):
    return MatrixField.constant(mesh, scale * np.eye(2))


@pytest.fixture
def coarse():
    return disk_mesh(0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
