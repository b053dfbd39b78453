import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))  # for `oracles`

from cgmlp.tensor import Rng


def make_class_templates(seed=99, classes=10):
    """Smooth per-class 3x32x32 templates: low-res noise upsampled 4x."""
    rng = Rng(seed)
    low = rng.normal((classes, 3, 8, 8), std=0.25, dtype=np.float32)
    return low.repeat(4, axis=2).repeat(4, axis=3)


def synth_images(templates, labels, rng, noise=0.12):
    t = templates[labels]
    imgs = 0.5 + t + rng.normal(t.shape, std=noise, dtype=np.float32)
    return np.clip(imgs, 0.0, 1.0)


def write_cifar10_dir(path, n_per_train_file=1300, n_test=1000, seed=4242):
    """Synthetic dataset in the exact CIFAR-10 binary layout.

    Real CIFAR-10 cannot be fetched in this offline environment; these files
    carry a learnable 10-class structure and exercise the byte-level pipeline
    end to end.  Real data dropped into CGMLP_DATA_DIR works identically.
    """
    os.makedirs(path, exist_ok=True)
    templates = make_class_templates()
    rng = Rng(seed)
    for fi, fname in enumerate([f"data_batch_{i}.bin" for i in range(1, 6)]
                               + ["test_batch.bin"]):
        n = n_test if fname == "test_batch.bin" else n_per_train_file
        labels = np.array([rng.next_u64() % 10 for _ in range(n)], dtype=np.int64)
        imgs = synth_images(templates, labels, rng)
        pix = np.round(imgs * 255.0).astype(np.uint8).reshape(n, 3072)
        recs = np.concatenate([labels.astype(np.uint8)[:, None], pix], axis=1)
        recs.tofile(os.path.join(path, fname))
    return path


@pytest.fixture(scope="session")
def cifar10_dir(tmp_path_factory):
    env = os.environ.get("CGMLP_DATA_DIR")
    if env and os.path.exists(os.path.join(env, "data_batch_1.bin")):
        return env
    return write_cifar10_dir(str(tmp_path_factory.mktemp("cifar10")))


@pytest.fixture
def rng():
    return Rng(1234)
