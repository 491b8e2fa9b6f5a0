import numpy as np
import pytest

from dynid import adcore as ad


def finite_difference_check(fn, params, h=1e-5, n_probe=6, seed=0, order=2):
    """Largest relative error between tape gradients and central differences
    of ``fn()`` (a scalar Tensor) at ``n_probe`` random entries per param.

    ``order=4`` uses the five-point stencil, which tolerates a larger ``h``
    and so keeps round-off small for losses of large magnitude."""
    with ad.Tape() as tape:
        root = fn()
    grads = tape.gradient(root, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for j in picks:
            old = flat[j]

            def at(offset):
                flat[j] = old + offset
                return fn().item()

            if order == 4:
                fd = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
            else:
                fd = (at(h) - at(-h)) / (2 * h)
            flat[j] = old
            an = g.reshape(-1)[j]
            scale = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / scale)
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


# acceptance criteria register their verdicts here; printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
