import numpy as np
import pytest


def random_orthogonal(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))[None, :]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
