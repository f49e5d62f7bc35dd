import numpy as np

from fieldfuse.distiller import TrainBatch
from fieldfuse.field import VoxelField


def rel_err(a, b, floor=1e-8):
    """Symmetric relative error with an absolute floor for near-zero pairs."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_field(rng, res=(5, 5, 5), lo=(-1.0,) * 3, hi=(1.0,) * 3, scale=3.0):
    res = tuple(res)
    return VoxelField(lo, hi, rng.normal(0, scale, res), rng.normal(0, scale * 2 / 3, res + (3,)))


def batch_from(points, target_sigma, target_color, delta=0.02):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(points)
    return TrainBatch(points, delta, np.asarray(target_sigma, dtype=np.float64).reshape(n),
                      np.asarray(target_color, dtype=np.float64).reshape(n, 3),
                      np.zeros(n, dtype=np.int64), n)
