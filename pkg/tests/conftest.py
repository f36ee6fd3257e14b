import numpy as np
import pytest

from eventlab.events import EventStream


def random_stream(rng, n=None, width=None, height=None, duration=None):
    """Unsorted-then-sorted random events; duration may exceed the last stamp."""
    width = width or int(rng.integers(2, 40))
    height = height or int(rng.integers(2, 30))
    n = int(rng.integers(0, 3000)) if n is None else n
    span = duration or int(rng.integers(1, 2_000_000))
    t = rng.integers(0, span, size=n)
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    return EventStream.from_unsorted(t, x, y, p, width, height, duration=span)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def isolated_env(tmp_path, monkeypatch):
    """Private cache, offline mode and a clean working directory."""
    monkeypatch.setenv("EVENTLAB_CACHE", str(tmp_path / "cache"))
    monkeypatch.setenv("EVENTLAB_OFFLINE", "1")
    monkeypatch.chdir(tmp_path)
    return tmp_path
