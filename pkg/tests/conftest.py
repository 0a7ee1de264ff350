import contextlib
import os

import numpy as np
import pytest

from branch_distill import autodiff as ad
from branch_distill.nn import build_branched_classifier, build_discriminator

MNIST_ROOT = os.environ.get("BRANCH_DISTILL_DATA", "/root/data")

# (criterion number, passed, detail) filled by test_acceptance.py
ACCEPTANCE = []


class Verdict:
    def __init__(self):
        self.ok = None
        self.detail = ""

    def set(self, ok, detail):
        self.ok, self.detail = bool(ok), detail


@contextlib.contextmanager
def criterion(number):
    """Record one acceptance verdict; an exception counts as a failure."""
    v = Verdict()
    try:
        yield v
    except BaseException as exc:
        if v.ok is None or v.ok:
            v.set(False, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
        raise
    finally:
        if v.ok is not None:
            ACCEPTANCE.append((number, v.ok, v.detail))
            print(f"criterion {number}: {'PASS' if v.ok else 'FAIL'}  {v.detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.clear_tape()
    yield
    ad.clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_model(seed=0, classes=4, k=2, channels=2, size=8):
    return build_branched_classifier(
        "tiny-resnet", classes=classes, k_branches=k, seed=seed, in_channels=channels, image_size=(size, size)
    )


def tiny_critic(seed=1, classes=4, image_shape=(2, 8, 8), hidden=(16, 16)):
    return build_discriminator(classes, image_shape, seed=seed, hidden=hidden)


def random_probs(rng, count, batch, classes):
    return [rng.dirichlet(np.ones(classes), batch) for _ in range(count)]
