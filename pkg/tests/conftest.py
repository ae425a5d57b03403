import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cigan.synthetic import make_unpaired_set  # noqa: E402
from cigan.training import TrainConfig  # noqa: E402

torch.set_num_threads(1)

# narrow networks keep the training tests fast; full widths are covered elsewhere
SMALL_DECODER = (32, 32, 16, 16, 8)
SMALL_DISC = (16, 16, 32, 32, 32)


@pytest.fixture(scope="session")
def tiny_dirs(tmp_path_factory):
    """Four normal and four low-light 48x48 images."""
    root = tmp_path_factory.mktemp("tiny")
    return make_unpaired_set(root, n_normal=4, n_low=4, size=48, seed=7)


@pytest.fixture
def tiny_cfg():
    def make(**overrides):
        base = dict(
            epochs=1,
            batch=2,
            crop=32,
            seed=0,
            num_threads=1,
            decoder_widths=SMALL_DECODER,
            disc_widths=SMALL_DISC,
        )
        base.update(overrides)
        return TrainConfig(**base)

    return make


@pytest.fixture(scope="session")
def encoder():
    from cigan.encoder import VGGEncoder

    return VGGEncoder.random(0)


# ---------------------------------------------------------------- acceptance report

_VERDICTS: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    verdict = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _VERDICTS.append(f"criterion {marker.args[0]}: {verdict}" + (f"  ({details})" if details else ""))


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
