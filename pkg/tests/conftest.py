import numpy as np
import pytest

from octquant.core import LabelMask, Volume3D, VoxelSpacing
from octquant.phantom import PhantomSpec, generate


def small_spec(**kw):
    """A fast phantom: 6 B-scans of 160 x 64, default layer stack."""
    base = dict(dims=(6, 160, 64), hrf={"count": 4}, seed=11)
    base.update(kw)
    return PhantomSpec.from_json(base)


@pytest.fixture(scope="session")
def small_phantom():
    return generate(small_spec())


@pytest.fixture
def spacing():
    return VoxelSpacing(3.9, 11.7, 47.2)


def make_mask(labels, spacing=None, laterality="OD"):
    return LabelMask(np.asarray(labels, dtype=np.uint8), spacing or VoxelSpacing(2.0, 12.0, 17.0), laterality)


def make_volume(voxels, spacing=None, dtype="f32"):
    return Volume3D(np.asarray(voxels, dtype=np.float32), spacing or VoxelSpacing(2.0, 12.0, 17.0), source_dtype=dtype)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
