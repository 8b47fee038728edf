import numpy as np
import pytest

from stars.config import DatasetConfig, TeacherConfig
from stars.data import load_dataset
from stars.nets import TeacherNet, train_teacher


def assert_grad_close(analytic, numeric, rel=1e-5, abs_small=1e-7):
    """Relative error below ``rel``; entries with magnitude < 1e-2 use absolute ``abs_small``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    assert analytic.shape == numeric.shape
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    small = mag < 1e-2
    err = np.abs(analytic - numeric)
    assert np.all(err[small] < abs_small), err[small].max()
    assert np.all(err[~small] / mag[~small] < rel), (err[~small] / mag[~small]).max()


@pytest.fixture(scope="session")
def blobs():
    return load_dataset(DatasetConfig())


@pytest.fixture(scope="session")
def trained_teacher(blobs):
    train, test = blobs
    t = TeacherConfig()
    net = TeacherNet(16, t.hidden, 4, seed=0)
    report = train_teacher(net, train, test, t.training(), seed=0)
    return net, report


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
