"""CIFAR-shaped natural-image stand-in built from scikit-image's bundled samples.

Each class is one source photograph; samples are random 32x32 RGB crops.
"""

import numpy as np
import skimage.data as sd

from pil_unlearn.dataset_io import LabeledDataset

SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
           "hubble_deep_field", "retina", "camera", "brick", "coins")


def _rgb(name):
    im = getattr(sd, name)()
    if im.ndim == 2:
        im = np.repeat(im[..., None], 3, axis=2)
    return im[..., :3]


def natural_patches(per_class, seed, side=32):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label, name in enumerate(SOURCES):
        im = _rgb(name)
        h, w = im.shape[:2]
        r = rng.integers(0, h - side, per_class)
        c = rng.integers(0, w - side, per_class)
        for i, j in zip(r, c):
            xs.append(im[i:i + side, j:j + side].transpose(2, 0, 1).reshape(-1))
        ys += [label] * per_class
    x = np.asarray(xs, dtype=np.float32) / 255.0
    return LabeledDataset(x, np.asarray(ys), (3, side, side), len(SOURCES))
