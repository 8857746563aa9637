"""Synthetic degradation of grayscale patches: blur, downsample, noise, JPEG-like.

Patches are 2-D float64 arrays with values in [0, 1]. Every stage clamps
its output back into that range.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate1d

from .rng import item_stream
from .textures import quantize_8bit

__all__ = [
    "DegradationConfig",
    "gaussian_kernel",
    "gaussian_blur",
    "downsample",
    "add_noise",
    "jpeg_like",
    "quant_table",
    "degrade",
    "upsample_nearest",
    "write_pgm",
    "read_pgm",
    "write_corpus",
    "read_corpus",
]

# ITU T.81 Annex K luminance table, natural (row-major) order
LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma: float = 1.0
    kernel_radius: int = 3
    downsample_factor: int = 2
    noise_sigma: float = 0.05
    jpeg_quality: int = 50
    rng_seed: int = 0
    second_order: bool = False

    def __post_init__(self):
        if self.blur_sigma < 0 or self.kernel_radius < 0:
            raise ValueError("blur_sigma and kernel_radius must be nonnegative")
        if self.blur_sigma > 0 and self.kernel_radius < math.ceil(3 * self.blur_sigma):
            raise ValueError("kernel_radius must be >= ceil(3 * blur_sigma)")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must lie in [1, 100]")

    def to_dict(self):
        return asdict(self)


def _clamp(a):
    return np.clip(a, 0.0, 1.0)


def gaussian_kernel(sigma, radius):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):  # tiny sigma collapses to a delta
        k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(p, sigma, radius):
    """Separable normalised Gaussian blur with reflect padding (edge not repeated)."""
    p = np.asarray(p, dtype=np.float64)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if sigma == 0 or radius == 0:
        return p.copy()
    k = gaussian_kernel(sigma, radius)
    out = correlate1d(p, k, axis=0, mode="mirror")
    out = correlate1d(out, k, axis=1, mode="mirror")
    return _clamp(out)


def downsample(p, r):
    """``r x r`` block-mean pooling."""
    p = np.asarray(p, dtype=np.float64)
    H, W = p.shape
    if r < 1 or H % r or W % r:
        raise ValueError(f"patch {H}x{W} is not divisible by factor {r}")
    if r == 1:
        return p.copy()
    return _clamp(p.reshape(H // r, r, W // r, r).mean(axis=(1, 3)))


def upsample_nearest(p, r):
    p = np.asarray(p, dtype=np.float64)
    return np.repeat(np.repeat(p, r, axis=0), r, axis=1)


def add_noise(p, sigma, seed):
    """Add i.i.d. ``N(0, sigma^2)`` noise; ``seed`` is an int or a Generator."""
    p = np.asarray(p, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return p.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _clamp(p + sigma * rng.standard_normal(p.shape))


def quant_table(quality):
    """Luminance table scaled by the IJG quality rule, entries in [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    q = np.floor((LUMA_QTABLE * scale + 50.0) / 100.0)
    return np.clip(q, 1.0, 255.0)


def _round_half_away(a):
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def jpeg_like(p, quality):
    """Blockwise 8x8 DCT quantisation round trip (no entropy coding).

    Like a real decoder the reconstruction is rounded to 8-bit grey levels,
    so the low-quality patch is always a valid 8-bit image.
    """
    p = np.asarray(p, dtype=np.float64)
    H, W = p.shape
    if H % 8 or W % 8:
        raise ValueError(f"patch {H}x{W} is not divisible into 8x8 blocks")
    Q = quant_table(quality)
    blocks = (p * 255.0 - 128.0).reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, axes=(2, 3), norm="ortho")
    coef = _round_half_away(coef / Q) * Q
    rec = idctn(coef, type=2, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(H, W)
    return quantize_8bit((rec + 128.0) / 255.0)


def degrade(p, cfg, index=0):
    """Apply blur -> downsample -> noise -> JPEG-like.

    The noise stream is derived from ``(cfg.rng_seed, index)`` so a batch
    item's degradation does not depend on its neighbours.
    """
    rng = item_stream(cfg.rng_seed, "degrade-noise", index)
    out = gaussian_blur(p, cfg.blur_sigma, cfg.kernel_radius)
    out = downsample(out, cfg.downsample_factor)
    out = add_noise(out, cfg.noise_sigma, rng)
    out = jpeg_like(out, cfg.jpeg_quality)
    if cfg.second_order:
        out = gaussian_blur(out, cfg.blur_sigma, cfg.kernel_radius)
        out = add_noise(out, cfg.noise_sigma, rng)
        out = jpeg_like(out, cfg.jpeg_quality)
    return out


def write_pgm(path, p):
    """Write a binary (P5) 8-bit PGM."""
    p = np.asarray(p, dtype=np.float64)
    data = np.floor(_clamp(p) * 255.0 + 0.5).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, count=W * H, offset=pos)
    return data.reshape(H, W).astype(np.float64) / maxval


def write_corpus(directory, hq_patches, cfg, labels=None):
    """Degrade each patch and write ``hq_XXXXX.pgm`` / ``lq_XXXXX.pgm`` plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, hq in enumerate(hq_patches):
        lq = degrade(hq, cfg, index=i)
        hq_name, lq_name = f"hq_{i:05d}.pgm", f"lq_{i:05d}.pgm"
        write_pgm(os.path.join(directory, hq_name), hq)
        write_pgm(os.path.join(directory, lq_name), lq)
        entries.append(
            {
                "index": i,
                "hq": hq_name,
                "lq": lq_name,
                "label": int(labels[i]) if labels is not None else 0,
                "seed": cfg.rng_seed,
            }
        )
    manifest = {"degradation": cfg.to_dict(), "items": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_corpus(directory):
    """Return ``(hq, lq, labels, cfg)`` arrays from a corpus directory."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    hq = np.stack([read_pgm(os.path.join(directory, e["hq"])) for e in manifest["items"]])
    lq = np.stack([read_pgm(os.path.join(directory, e["lq"])) for e in manifest["items"]])
    labels = np.array([e["label"] for e in manifest["items"]], dtype=np.int64)
    return hq, lq, labels, DegradationConfig(**manifest["degradation"])
