import numpy as np
import pytest

from magpack import packet as pk


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_width(rng, d, re_scale=0.4, im_range=(0.5, 1.8)):
    """Random admissible width matrix: symmetric with SPD imaginary part."""
    m = rng.normal(size=(d, d)) * re_scale
    cr = 0.5 * (m + m.T)
    v = np.linalg.qr(rng.normal(size=(d, d)))[0]
    ci = v @ np.diag(rng.uniform(*im_range, size=d)) @ v.T
    return cr + 1j * ci


def random_packet(rng, d, eps=0.1, center_scale=0.4):
    u = pk.GaussianPacket(
        eps=eps,
        q=rng.normal(size=d) * center_scale,
        p=rng.normal(size=d) * center_scale,
        C=random_width(rng, d),
    )
    return pk.normalize(u)
