"""View-dependent color field, parameterized independently of the SDF grid.

Position goes through a multi-resolution hashed feature grid; features,
a polynomial view-direction encoding and the surface normal feed a
two-hidden-layer ReLU decoder with a sigmoid output. Geometry only reaches
this module through the normal, so disabling that input cuts every path
from color back into the SDF.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from voxgrad import _kernels
from voxgrad.errors import QueryOutsideGrid
from voxgrad.sdf_grid import CLAMP_TOL

PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

_MAGIC = b"RADF"


@dataclass(frozen=True)
class RadianceConfig:
    n_levels: int = 8
    table_size: int = 2**14
    n_features: int = 2
    n_min: int = 16
    n_max: int = 256
    hidden: int = 32
    view_degree: int = 4

    @property
    def input_dim(self) -> int:
        return self.n_levels * self.n_features + 3 * self.view_degree + 3

    def level_resolutions(self) -> np.ndarray:
        if self.n_levels == 1:
            return np.array([self.n_min], dtype=np.int64)
        growth = np.exp((np.log(self.n_max) - np.log(self.n_min)) / (self.n_levels - 1))
        res = np.floor(self.n_min * growth ** np.arange(self.n_levels) + 1e-9)
        return res.astype(np.int64)


@dataclass
class RadianceParams:
    config: RadianceConfig
    lo: np.ndarray
    hi: np.ndarray
    tables: np.ndarray  # (L, T, F)
    layers: list[np.ndarray] = field(default_factory=list)  # W1, b1, W2, b2, W3, b3

    def copy(self) -> "RadianceParams":
        return RadianceParams(
            self.config, self.lo.copy(), self.hi.copy(), self.tables.copy(), [a.copy() for a in self.layers]
        )

    def astype(self, dtype) -> "RadianceParams":
        return RadianceParams(
            self.config,
            self.lo.copy(),
            self.hi.copy(),
            self.tables.astype(dtype),
            [a.astype(dtype) for a in self.layers],
        )


def init_params(config: RadianceConfig, lo, hi, rng: np.random.Generator, dtype=np.float32) -> RadianceParams:
    """Tables uniform in +-1e-4, decoder weights He-uniform, zero biases."""
    tables = rng.uniform(-1e-4, 1e-4, size=(config.n_levels, config.table_size, config.n_features))
    dims = [config.input_dim, config.hidden, config.hidden, 3]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        layers.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        layers.append(np.zeros(fan_out, dtype=dtype))
    return RadianceParams(
        config,
        np.asarray(lo, dtype=np.float64).copy(),
        np.asarray(hi, dtype=np.float64).copy(),
        tables.astype(dtype),
        layers,
    )


def hash_corners(corners: np.ndarray, table_size: int) -> np.ndarray:
    """XOR of coordinates times fixed primes, wrapped to 32 bits, mod T."""
    c = corners.astype(np.uint64) * PRIMES[: corners.shape[-1]]
    h = c[..., 0]
    for k in range(1, corners.shape[-1]):
        h = h ^ c[..., k]
    return ((h & np.uint64(0xFFFFFFFF)) % np.uint64(table_size)).astype(np.int64)


@dataclass
class EncodeCache:
    ids: np.ndarray  # (N, L, 8) flat ids into tables.reshape(-1, F)
    weights: np.ndarray  # (N, L, 8)


def encode(params: RadianceParams, x) -> tuple[np.ndarray, EncodeCache]:
    """Hash-grid features of shape ``(N, L*F)`` for points ``(N, 3)``."""
    cfg = params.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = (x - params.lo) / (params.hi - params.lo)
    if np.any((t < -CLAMP_TOL) | (t > 1 + CLAMP_TOL)):
        raise QueryOutsideGrid("radiance query outside the scene box")
    t = np.clip(t, 0.0, 1.0)
    n = x.shape[0]
    ids = np.empty((n, cfg.n_levels, 8), dtype=np.int64)
    weights = np.empty((n, cfg.n_levels, 8), dtype=np.float64)
    feats = np.empty((n, cfg.n_levels * cfg.n_features), dtype=np.float64)
    tables = np.ascontiguousarray(params.tables, dtype=np.float64)
    _kernels.hash_encode(t, tables, cfg.level_resolutions(), cfg.table_size, ids, weights, feats)
    return feats, EncodeCache(ids, weights)


def view_features(v: np.ndarray, degree: int) -> np.ndarray:
    """Raw component powers ``v, v**2, ..., v**degree`` -> ``(N, 3*degree)``."""
    return np.concatenate([v**p for p in range(1, degree + 1)], axis=-1)


@dataclass
class ShadeCache:
    encode: EncodeCache
    inputs: list[np.ndarray]  # activations entering each linear layer
    pre: list[np.ndarray]  # pre-activations of the hidden layers
    color: np.ndarray


def shade(params: RadianceParams, x, v, n) -> tuple[np.ndarray, ShadeCache]:
    """Colors in (0, 1) for points ``x`` seen along ``v`` with normal ``n``."""
    cfg = params.config
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    feats, enc = encode(params, x)
    h = np.concatenate([feats, view_features(v, cfg.view_degree), n], axis=-1)
    w1, b1, w2, b2, w3, b3 = (a.astype(np.float64, copy=False) for a in params.layers)
    z1 = h @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w2 + b2
    a2 = np.maximum(z2, 0.0)
    color = expit(a2 @ w3 + b3)
    return color, ShadeCache(enc, [h, a1, a2], [z1, z2], color)


@dataclass
class RadianceGrad:
    tables: np.ndarray  # dense (L*T, F) gradient of the hash tables
    rows: np.ndarray  # sorted ids of table rows with a nonzero gradient
    layers: list[np.ndarray]
    d_normal: np.ndarray  # (N, 3)

    def dense_tables(self, params: RadianceParams) -> np.ndarray:
        return self.tables.reshape(params.tables.shape)


def backprop_shade(params: RadianceParams, cache: ShadeCache, d_color) -> RadianceGrad:
    """Gradients of ``sum(d_color * color)`` w.r.t. tables, decoder and normal."""
    cfg = params.config
    d_color = np.asarray(d_color, dtype=np.float64).reshape(cache.color.shape)
    w1, _, w2, _, w3, _ = (a.astype(np.float64, copy=False) for a in params.layers)
    h, a1, a2 = cache.inputs
    z1, z2 = cache.pre
    c = cache.color
    dz3 = d_color * c * (1.0 - c)
    g_w3, g_b3 = a2.T @ dz3, dz3.sum(axis=0)
    dz2 = (dz3 @ w3.T) * (z2 > 0)
    g_w2, g_b2 = a1.T @ dz2, dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (z1 > 0)
    g_w1, g_b1 = h.T @ dz1, dz1.sum(axis=0)
    dh = dz1 @ w1.T
    n_feat = cfg.n_levels * cfg.n_features
    enc = cache.encode
    g_tables = np.zeros((cfg.n_levels * cfg.table_size, cfg.n_features))
    _kernels.scatter_table_grad(enc.ids, enc.weights, np.ascontiguousarray(dh[:, :n_feat]), g_tables)
    return RadianceGrad(
        tables=g_tables,
        rows=np.flatnonzero(np.any(g_tables != 0.0, axis=1)),
        layers=[g_w1, g_b1, g_w2, g_b2, g_w3, g_b3],
        d_normal=dh[:, -3:],
    )


# --- checkpoint -----------------------------------------------------------


def save_params(params: RadianceParams, path) -> None:
    cfg = params.config
    header = _MAGIC + struct.pack(
        "<7I",
        cfg.n_levels,
        cfg.table_size,
        cfg.n_features,
        cfg.n_min,
        cfg.n_max,
        cfg.hidden,
        cfg.view_degree,
    )
    header += struct.pack("<6d", *params.lo, *params.hi)
    body = [np.asarray(params.tables, dtype="<f4").tobytes()]
    body += [np.asarray(a, dtype="<f4").tobytes() for a in params.layers]
    Path(path).write_bytes(header + b"".join(body))


def load_params(path) -> RadianceParams:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a radiance checkpoint")
    cfg = RadianceConfig(*struct.unpack_from("<7I", data, 4))
    box = struct.unpack_from("<6d", data, 32)
    off = 32 + 48

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
        return arr

    tables = take((cfg.n_levels, cfg.table_size, cfg.n_features))
    dims = [cfg.input_dim, cfg.hidden, cfg.hidden, 3]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        layers.append(take((fan_in, fan_out)))
        layers.append(take((fan_out,)))
    return RadianceParams(cfg, np.array(box[:3]), np.array(box[3:]), tables, layers)
