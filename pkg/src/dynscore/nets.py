"""Feed-forward networks on flat parameter vectors with exact reverse-mode gradients.

A network maps ``(x, t, y)`` to an output vector. The first layer sees
``x`` concatenated with sinusoidal features of the timestep ``t`` and a
learned embedding of the discrete label ``y``. Parameters live in one flat
float64 vector laid out as::

    [label table (num_labels x cond_embed_dim)]
    [W_1 (fan_in x fan_out, row-major), b_1] ... [W_L, b_L]

Every function here works on a single sample (``x`` 1-D) or a batch
(``x`` 2-D, ``t`` and ``y`` scalars or length-B arrays).
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

__all__ = [
    "NetSpec",
    "GradCheckReport",
    "init_params",
    "forward",
    "backward",
    "gradcheck",
    "time_features",
    "save_params",
    "load_params",
]

ACTIVATIONS = ("tanh", "silu")
CHECKPOINT_MAGIC = b"DSNP"
CHECKPOINT_VERSION = 1


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "silu"
    time_embed_dim: int = 0
    cond_embed_dim: int = 0
    num_labels: int = 1
    time_period: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a nonnegative even integer")
        if self.cond_embed_dim < 0 or self.num_labels < 1:
            raise ValueError("cond_embed_dim must be >= 0 and num_labels >= 1")

    @property
    def layer_dims(self):
        first = self.input_dim + self.time_embed_dim + self.cond_embed_dim
        return (first, *self.hidden_dims, self.output_dim)

    @property
    def table_size(self):
        return self.num_labels * self.cond_embed_dim

    @property
    def n_params(self):
        dims = self.layer_dims
        return self.table_size + sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    def to_dict(self):
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def _unpack(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise DimensionMismatch(f"expected {spec.n_params} params, got {params.shape}")
    table = params[: spec.table_size].reshape(spec.num_labels, spec.cond_embed_dim)
    layers = []
    offset = spec.table_size
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return table, layers


def init_params(spec, rng, zero_output=False):
    """Scaled-uniform initialisation; ``zero_output`` zeroes the last layer."""
    parts = [rng.normal(0.0, 1.0, spec.table_size)]
    dims = spec.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        if last and zero_output:
            W = np.zeros(fan_in * fan_out)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-bound, bound, fan_in * fan_out)
        parts += [W, np.zeros(fan_out)]
    return np.concatenate(parts)


def time_features(spec, t):
    """Sinusoidal features of integer timesteps, shape ``(B, time_embed_dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = spec.time_embed_dim // 2
    freqs = (np.pi / spec.time_period) * 2.0 ** np.arange(half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _prepare(spec, x, t, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"expected input dim {spec.input_dim}, got shape {x.shape}")
    B = X.shape[0]
    cols = [X]
    if spec.time_embed_dim:
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        cols.append(time_features(spec, tt))
    labels = None
    if spec.cond_embed_dim:
        labels = np.broadcast_to(np.asarray(y if y is not None else 0, dtype=np.int64), (B,))
        if labels.min() < 0 or labels.max() >= spec.num_labels:
            raise ValueError(f"labels must lie in [0, {spec.num_labels})")
    return X, cols, labels, single


def _act(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    return z * expit(z)


def _act_grad(kind, z, a):
    if kind == "tanh":
        return 1.0 - a * a
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def _forward_cached(spec, params, x, t, y):
    table, layers = _unpack(spec, params)
    X, cols, labels, single = _prepare(spec, x, t, y)
    if labels is not None:
        cols.append(table[labels])
    h = np.concatenate(cols, axis=1) if len(cols) > 1 else cols[0]
    cache = [(h, None, None)]
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = _act(spec.activation, z)
        else:
            h = z
        cache.append((h, z, W))
    return h, cache, labels, single


def forward(spec, params, x, t=0, y=None):
    """Evaluate the network; output has shape ``(output_dim,)`` or ``(B, output_dim)``."""
    out, _, _, single = _forward_cached(spec, params, x, t, y)
    return out[0] if single else out


def backward(spec, params, x, t=0, y=None, out_grad=None):
    """Gradients of ``sum(out_grad * forward(...))`` w.r.t. params and ``x``.

    Returns
    -------
    param_grad : ndarray of shape (n_params,)
        Summed over the batch.
    input_grad : ndarray shaped like ``x``
    """
    out, cache, labels, single = _forward_cached(spec, params, x, t, y)
    g = np.asarray(out_grad, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != out.shape:
        raise DimensionMismatch(f"out_grad shape {g.shape} does not match output {out.shape}")

    n_layers = len(cache) - 1
    layer_grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        h_out, z, W = cache[i + 1]
        if i < n_layers - 1:
            g = g * _act_grad(spec.activation, z, h_out)
        h_in = cache[i][0]
        layer_grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ W.T

    table_grad = np.zeros((spec.num_labels, spec.cond_embed_dim))
    if labels is not None:
        start = spec.input_dim + spec.time_embed_dim
        np.add.at(table_grad, labels, g[:, start:])

    param_grad = np.concatenate(
        [table_grad.ravel()] + [p.ravel() for gw, gb in layer_grads for p in (gw, gb)]
    )
    input_grad = g[:, : spec.input_dim]
    return param_grad, (input_grad[0] if single else input_grad)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: dict = field(default_factory=dict)

    @property
    def pass_(self):
        return self.passed


def _rel_err(analytic, numeric, floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(spec, params, x, t=0, y=None, tolerance=1e-4, *, rng=None, n_coords=256, step=1e-5):
    """Compare :func:`backward` with central differences.

    Checks a random probe direction in parameter space, a random subset of
    at least ``n_coords`` parameter coordinates (all of them when fewer
    exist) and every input coordinate. The relative error of each scalar
    comparison is ``|a - n| / max(|a|, |n|, floor)`` where ``floor`` is
    ``1e-6`` times the largest analytic gradient entry; this keeps
    near-zero coordinates from reporting pure round-off.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    out = forward(spec, params, x, t, y)
    out_grad = rng.normal(size=out.shape)

    def f_params(p):
        return float(np.sum(out_grad * forward(spec, p, x, t, y)))

    def f_input(xx):
        return float(np.sum(out_grad * forward(spec, params, xx, t, y)))

    pg, ig = backward(spec, params, x, t, y, out_grad)
    scale = max(np.max(np.abs(pg)), np.max(np.abs(ig)), 1.0)
    floor = 1e-6 * scale
    errs = {}

    v = rng.normal(size=params.shape)
    v /= np.linalg.norm(v)
    num = (f_params(params + step * v) - f_params(params - step * v)) / (2 * step)
    errs["probe"] = _rel_err(float(pg @ v), num, floor)

    n = min(spec.n_params, max(int(n_coords), 256))
    coords = rng.choice(spec.n_params, size=n, replace=False)
    for k in coords:
        e = np.zeros_like(params)
        e[k] = step
        num = (f_params(params + e) - f_params(params - e)) / (2 * step)
        errs[f"param[{k}]"] = _rel_err(pg[k], num, floor)

    flat_x = x.ravel()
    flat_ig = np.asarray(ig).ravel()
    for k in range(flat_x.size):
        e = np.zeros_like(flat_x)
        e[k] = step
        num = (f_input((flat_x + e).reshape(x.shape)) - f_input((flat_x - e).reshape(x.shape))) / (2 * step)
        errs[f"input[{k}]"] = _rel_err(flat_ig[k], num, floor)

    worst_key = max(errs, key=errs.get)
    max_err = errs[worst_key]
    return GradCheckReport(
        max_rel_err=float(max_err),
        passed=bool(tolerance > 0 and max_err <= tolerance),
        n_checked=len(errs),
        worst={"coordinate": worst_key, "rel_err": float(max_err)},
    )


def save_params(path, spec, params):
    """Write a checkpoint: header then little-endian float64 payload.

    Header layout (little-endian): magic ``DSNP``, u32 version, 32-byte
    SHA-256 of the spec, u32 spec-JSON length, spec JSON, u32 layer count,
    u64 per layer width, u64 parameter count.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.n_params,):
        raise DimensionMismatch(f"expected {spec.n_params} params, got {params.shape}")
    spec_json = json.dumps(spec.to_dict(), sort_keys=True).encode()
    dims = spec.layer_dims
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(spec.digest())
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}Q", *dims))
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.astype("<f8").tobytes())


def load_params(path, spec=None):
    """Read a checkpoint written by :func:`save_params`.

    Returns ``(spec, params)``. When ``spec`` is given its hash must match
    the stored one.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[8:40]
    (n_json,) = struct.unpack_from("<I", blob, 40)
    pos = 44
    stored = json.loads(blob[pos : pos + n_json])
    pos += n_json
    (n_dims,) = struct.unpack_from("<I", blob, pos)
    pos += 4 + 8 * n_dims
    (n_params,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    stored_spec = NetSpec(**{**stored, "hidden_dims": tuple(stored["hidden_dims"])})
    if stored_spec.digest() != digest:
        raise ValueError(f"{path}: header hash does not match stored spec")
    if spec is not None and spec.digest() != digest:
        raise ValueError(f"{path}: checkpoint was written for a different network spec")
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    return stored_spec, params
