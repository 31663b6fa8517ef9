import numpy as np
import pytest

from hran.data import ImageU8


def numeric_grad(f, x, eps=1e-3):
    """Central differences of the scalar function ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    """Largest elementwise |a - b| / max(|a|, |b|); pairs both below ``floor`` compare absolutely."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def conv_oracle(x, w, b, d):
    """Direct nested-loop convolution with explicit zero padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    out = np.zeros((n, o, h, wd))
    for bn in range(n):
        for oc in range(o):
            for y in range(h):
                for xx in range(wd):
                    s = float(b[oc])
                    for ic in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                yy, xs = y + d * ky - ph, xx + d * kx - pw
                                if 0 <= yy < h and 0 <= xs < wd:
                                    s += float(w[oc, ic, ky, kx]) * float(x[bn, ic, yy, xs])
                    out[bn, oc, y, xx] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w):
    return ImageU8(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def edge_image(n=64, count=12, seed=3):
    """Grey-level image of overlapping XOR-ed rectangles: hard edges bicubic cannot keep sharp."""
    r = np.random.default_rng(seed)
    img = np.zeros((n, n))
    for _ in range(count):
        y0, x0 = r.integers(0, n - 4, 2)
        hh, ww = r.integers(3, 24, 2)
        img[y0 : y0 + hh, x0 : x0 + ww] = 1 - img[y0 : y0 + hh, x0 : x0 + ww]
    img = img * 0.8 + 0.1
    return ImageU8(np.round(np.repeat(img[..., None], 3, 2) * 255).astype(np.uint8))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
