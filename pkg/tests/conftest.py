import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def random_boxes(rng, dims, n_max, edge_max=3):
    """Mask made of up to ``n_max`` small random boxes, so component counts stay small."""
    out = np.zeros(dims, dtype=bool)
    for _ in range(int(rng.integers(0, n_max + 1))):
        size = [int(rng.integers(1, min(edge_max, n) + 1)) for n in dims]
        lo = [int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size)]
        out[tuple(slice(a, a + s) for a, s in zip(lo, size))] = True
    return out


def jitter(rng, mask):
    """Shift a mask by up to one voxel per axis; voxels pushed off the grid are lost."""
    shift = rng.integers(-1, 2, size=3)
    out = np.zeros_like(mask)
    src = [slice(max(0, -s), n - max(0, s)) for s, n in zip(shift, mask.shape)]
    dst = [slice(max(0, s), n - max(0, -s)) for s, n in zip(shift, mask.shape)]
    out[tuple(dst)] = mask[tuple(src)]
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")


@pytest.fixture
def record():
    def _record(k, ok, detail):
        prev = ACCEPTANCE.get(k)
        ok = ok and (prev is None or prev[0])
        ACCEPTANCE[k] = (ok, detail if prev is None else f"{prev[1]}; {detail}")
    return _record
