import tempfile
from pathlib import Path

import pytest

from adaptloop.broker import Broker


@pytest.fixture
def tmp_broker(tmp_path):
    broker = Broker(tmp_path / "broker")
    yield broker
    broker.close()


@pytest.fixture
def server():
    """Fresh full stack on a free port; torn down after the test."""
    from adaptloop.serve import ServerHandle, build_state
    from adaptloop.cli import _free_port

    tmp = tempfile.TemporaryDirectory(prefix="adaptloop-test-")
    state = build_state(Path(tmp.name))
    handle = ServerHandle(state, port=_free_port()).start()
    yield handle
    handle.stop()
    tmp.cleanup()
