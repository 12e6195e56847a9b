import numpy as np
import pytest

from brainrefine.backbone import ToyBackbone, ToyBackboneConfig
from brainrefine.bold_dataset import split_trs, stack_windows
from brainrefine.encoding_head import EncodingHead, EncodingModel
from brainrefine.synth_data import gen_stimulus

TINY_BACKBONE = dict(dim=16, n_layers=2, n_heads=2, seed=0)


@pytest.fixture(scope="session")
def tiny_audio():
    return gen_stimulus(24 * 1.5, seed=0)


@pytest.fixture(scope="session")
def tiny_windows(tiny_audio):
    return stack_windows(tiny_audio, 1)


@pytest.fixture(scope="session")
def tiny_split():
    return split_trs(24, seed=0)


def make_tiny_model(n_voxels=6, head_seed=0):
    return EncodingModel(ToyBackbone(ToyBackboneConfig(**TINY_BACKBONE)), EncodingHead(1, 16, n_voxels, seed=head_seed))


@pytest.fixture
def tiny_bold():
    return np.random.default_rng(0).standard_normal((24, 6)).astype(np.float32)


# -- acceptance reporting ----------------------------------------------------------
# tests tagged with @pytest.mark.criterion(k, text) get one PASS/FAIL line each in the summary

_CRITERIA = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    num, text = mark.args
    ok = _CRITERIA.get(num, (True, text))[0] and rep.passed
    _CRITERIA[num] = (ok, text)


@pytest.fixture
def detail(request):
    """Attach a measured value to the criterion's summary line."""
    num = request.node.get_closest_marker("criterion").args[0]

    def add(msg):
        _DETAILS.setdefault(num, []).append(str(msg))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        ok, text = _CRITERIA[num]
        extra = "; ".join(_DETAILS.get(num, []))
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] C{num} {text}" + (f" ({extra})" if extra else ""))
