import numpy as np
import pytest

from slimseg import dataset


def sobel_reference(gray):
    """Nested-loop Sobel + magnitude oracle with replicate border padding."""
    h, w = gray.shape
    kh = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    kv = kh.T
    s_h = np.zeros((h, w))
    s_v = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    s_h[y, x] += kh[dy + 1, dx + 1] * gray[yy, xx]
                    s_v[y, x] += kv[dy + 1, dx + 1] * gray[yy, xx]
    return s_h, s_v


def sc_mean_reference(gray):
    s_h, s_v = sobel_reference(gray)
    return float(np.sqrt(s_h ** 2 + s_v ** 2).sum() / gray.size)


def maxwell_draws(a, n, seed):
    """Maxwell(a) samples as the norm of three iid N(0, a) components."""
    rng = np.random.default_rng(seed)
    return np.linalg.norm(rng.normal(0.0, a, size=(n, 3)), axis=1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small on-disk corpus shared by trainer / cli / report tests."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = dataset.SynthConfig(num_images=30, height=24, width=24,
                              num_classes=3, seed=5)
    manifest = dataset.generate_synthetic(cfg, str(root))
    return manifest
