import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blockcs.data import write_pgm  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def smooth_image(seed, size):
    """Deterministic smooth-ish 8-bit test image: a few random sinusoids."""
    r = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    for _ in range(4):
        fx, fy = r.uniform(0.5, 3.0, size=2)
        phase = r.uniform(0, 2 * np.pi)
        img += np.sin(2 * np.pi * (fx * x + fy * y) + phase)
    img = (img - img.min()) / (img.max() - img.min())
    return np.rint(img * 255).astype(np.uint8)


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "images"
    d.mkdir()
    for i in range(3):
        write_pgm(d / f"img{i}.pgm", smooth_image(i, 32))
    return d


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    pytest.importorskip("skimage")
    from desk_data import write_desk_dataset

    return write_desk_dataset(tmp_path_factory.mktemp("desk"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
