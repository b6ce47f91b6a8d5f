import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, k, b, stride, padding):
    """Direct nested-loop cross-correlation, used as an oracle."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[a, c, y * stride + i, z * stride + j] * k[o, c, i, j]
                    out[a, o, y, z] = acc
    return out


def naive_maxpool2(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for d in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, d, i, j] = max(x[a, d, 2 * i + di, 2 * j + dj] for di in (0, 1) for dj in (0, 1))
    return out


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at numpy array x (float64)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f(x)
        flat[i] = o - h
        fm = f(x)
        flat[i] = o
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; use as ``criterion(n, ok, detail)`` then assert ``ok``."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
