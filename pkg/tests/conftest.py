import numpy as np
import pytest
from scipy.ndimage import gaussian_filter


def two_texture_image(n=64, seed=0):
    """Left half 2px checkerboard, right half 2px vertical stripes, grey
    levels 0.2/0.8 plus N(0, 0.03^2) noise."""
    r, c = np.mgrid[0:n, 0:n]
    checker = ((r // 2 + c // 2) % 2).astype(float)
    stripes = ((c // 2) % 2).astype(float)
    img = np.where(c < n // 2, checker, stripes) * 0.6 + 0.2
    img = img + 0.03 * np.random.default_rng(seed).standard_normal(img.shape)
    return np.clip(img, 0, 1)[..., None].astype(np.float32)


def smooth_images(n, size=48, sigma=2.0, seed=0):
    """Gaussian-filtered white noise rescaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        z = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        out.append(((z - z.min()) / (z.max() - z.min()))[..., None])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_texture():
    return two_texture_image()


# One line per acceptance criterion, printed in the terminal summary so the
# verdicts are visible even when output capture is on.
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}" + (f" | {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
