"""Procedural grayscale texture patches with class labels."""

import numpy as np

__all__ = ["TEXTURE_CLASSES", "make_patch", "make_patches"]

TEXTURE_CLASSES = ("stripes", "checker", "blobs", "edge")


def _grid(size):
    c = np.arange(size, dtype=np.float64)
    return np.meshgrid(c, c, indexing="ij")


def _stripes(size, rng):
    yy, xx = _grid(size)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(0.03, 0.1)
    amp = rng.uniform(0.2, 0.4)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + amp * np.sin(2.0 * np.pi * freq * u + rng.uniform(0.0, 2.0 * np.pi))


def _checker(size, rng):
    yy, xx = _grid(size)
    cell = int(rng.choice([4, 8]))
    oy, ox = rng.integers(0, cell, 2)
    lo, hi = np.sort(rng.uniform(0.1, 0.9, 2))
    mask = ((yy + oy) // cell + (xx + ox) // cell) % 2
    return np.where(mask > 0, hi, lo)


def _blobs(size, rng):
    yy, xx = _grid(size)
    out = np.full((size, size), rng.uniform(0.1, 0.4))
    for _ in range(int(rng.integers(2, 4))):
        cy, cx = rng.uniform(0, size, 2)
        w = rng.uniform(2.0, 5.0)
        out += rng.uniform(0.3, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    return out


def _edge(size, rng):
    yy, xx = _grid(size)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c = (size - 1) / 2.0
    u = (xx - c) * np.cos(theta) + (yy - c) * np.sin(theta) - rng.uniform(-3.0, 3.0)
    ramp = rng.uniform(-0.02, 0.02) * (xx + yy)
    lo, hi = np.sort(rng.uniform(0.1, 0.9, 2))
    return np.where(u > 0, hi, lo) + ramp


_MAKERS = (_stripes, _checker, _blobs, _edge)


def quantize_8bit(p):
    """Round to the nearest of the 256 grey levels ``k / 255``."""
    return np.floor(np.clip(p, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def make_patch(label, size, rng):
    """One ``size x size`` 8-bit patch of texture class ``label`` with values in [0, 1]."""
    return quantize_8bit(_MAKERS[label % len(_MAKERS)](size, rng))


def make_patches(n, size=16, num_labels=4, rng=None):
    """Return ``(patches, labels)`` with labels drawn uniformly from ``range(num_labels)``."""
    if not 1 <= num_labels <= len(_MAKERS):
        raise ValueError(f"num_labels must lie in [1, {len(_MAKERS)}]")
    rng = np.random.default_rng(rng)
    labels = rng.integers(0, num_labels, n)
    patches = np.stack([make_patch(int(k), size, rng) for k in labels]) if n else np.zeros((0, size, size))
    return patches, labels
