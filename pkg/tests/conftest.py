import contextlib
import time

import numpy as np
import pytest

from olbp.model import Network, OLBPConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_net():
    return Network(OLBPConfig.toy())


@pytest.fixture(scope="session")
def tiny_cfg():
    return OLBPConfig.tiny()


@pytest.fixture(scope="session")
def full_run():
    """Full-size network and one inference pass on a zero image: (net, outputs, seconds)."""
    import time

    from olbp.model import forward
    from olbp.tensor import no_grad

    t0 = time.perf_counter()
    net = Network(OLBPConfig.paper())
    with no_grad():
        out = forward(net, np.zeros((1, 3, 288, 288), np.float32), np.zeros((288, 288)))
    return net, out, time.perf_counter() - t0


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``with criterion(name) as notes:`` records one PASS/FAIL line for ``name``."""
    @contextlib.contextmanager
    def run(name):
        notes: list[str] = []
        t0 = time.perf_counter()

        def record(ok, extra=()):
            parts = notes + list(extra) + [f"{time.perf_counter() - t0:.1f}s"]
            line = f"{'PASS' if ok else 'FAIL'}  {name}  [{'; '.join(parts)}]"
            _CRITERIA.append(line)
            print(line)
        try:
            yield notes
        except BaseException as exc:
            msg = str(exc).strip().splitlines()
            record(False, [f"{type(exc).__name__}: {msg[0] if msg else ''}"])
            raise
        record(True)
    return run


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
