import numpy as np
import pytest

from dadet.datagen import generate_split
from dadet.detector import Detector, DetectorConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_split(7, {"source_train": 24, "target_train": 24, "target_test": 12, "source_test": 12})


@pytest.fixture
def model():
    return Detector(DetectorConfig(), seed=3)


def naive_conv2d(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, f, i, j] += xp[b, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
    return out


def brute_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    return inter / (area_a + area_b - inter)


def random_boxes(rng, n, size=64.0, min_wh=1.0, max_wh=30.0):
    xy = rng.uniform(0, size - min_wh, (n, 2))
    wh = rng.uniform(min_wh, max_wh, (n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, size)], axis=1)


# -- acceptance reporting: one pass/fail line per criterion --------------------

_CRITERIA = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as note:`` records PASS/FAIL for criterion n;
    ``note(text)`` appends measured values to its line."""
    import contextlib

    store = request.config.stash.setdefault(_CRITERIA, {})

    @contextlib.contextmanager
    def record(n, title):
        details = []
        try:
            yield details.append
        except BaseException:
            store[n] = ("FAIL", title, details)
            print(_line(n, store[n]))
            raise
        store[n] = ("PASS", title, details)
        print(_line(n, store[n]))

    return record


def _line(n, entry):
    status, title, details = entry
    extra = f" ({'; '.join(details)})" if details else ""
    return f"criterion {n} {status}: {title}{extra}"


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(_line(n, store[n]))
