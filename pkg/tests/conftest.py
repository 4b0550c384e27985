import numpy as np
import pytest

from skyfuse.net.model import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    """Smallest config that still exercises every layer type."""
    return NetworkConfig(
        image_px=8,
        patch_px=2,
        embed_dim=8,
        num_blocks=2,
        window=2,
        shift=1,
        heads=2,
        heat_px=16,
        cnn_channels=(4, 8),
        n_stars=3,
        coord_hidden=8,
        fusion_hidden=8,
        k=5,
    )


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (status, detail) in sorted(
        _ACCEPTANCE.items(), key=lambda kv: int(kv[0].split("test_criterion_")[1].split("_")[0])
    ):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
