"""Dense signed-distance grid: d-linear interpolation and gradient estimators.

Two gradient estimators are provided for a query point:

* the *analytical* gradient, i.e. the exact derivative of the d-linear
  interpolant. It is constant along each axis inside a cube and jumps
  across the faces shared by adjacent cubes;
* the *interpolated* gradient, the d-linear blend of per-vertex
  central-difference gradients. It is continuous everywhere.

Both are expressed in world units. All batched functions accept points of
shape ``(..., d)`` and work in float64 regardless of the storage dtype.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from voxgrad.errors import GridTooSmall, InvalidResolution, QueryOutsideGrid

# points this far (in lattice units) outside the box are clamped back in
CLAMP_TOL = 1e-9

_MAGIC = b"SDFG"


@lru_cache(maxsize=None)
def corner_offsets(dim: int) -> np.ndarray:
    """``(2**dim, dim)`` array of cube-corner offsets in {0, 1}."""
    return np.array(list(itertools.product((0, 1), repeat=dim)), dtype=np.int64)


@dataclass
class SdfGrid:
    """Signed distances sampled on the vertices of a regular lattice.

    ``values[i, j, k]`` is the distance at world position
    ``origin + (i, j, k) * spacing``.
    """

    values: np.ndarray
    origin: np.ndarray
    spacing: float

    def __post_init__(self) -> None:
        # float64 arrays are kept as-is (64-bit oracle paths); all else is f32
        if not (isinstance(self.values, np.ndarray) and self.values.dtype in (np.float32, np.float64)):
            self.values = np.asarray(self.values, dtype=np.float32)
        # flat vertex ids assume C order; in-place updates rely on a view
        self.values = np.ascontiguousarray(self.values)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(-1)
        self.spacing = float(self.spacing)
        if self.values.ndim not in (2, 3):
            raise InvalidResolution(f"grid must be 2D or 3D, got {self.values.ndim}D")
        if self.origin.shape != (self.values.ndim,):
            raise InvalidResolution("origin length must match grid dimension")
        if not self.spacing > 0:
            raise InvalidResolution(f"spacing must be positive, got {self.spacing}")
        if min(self.values.shape) < 2:
            raise InvalidResolution(f"need at least 2 vertices per axis, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def from_function(cls, fn, resolution, lo, hi, dtype=np.float32) -> "SdfGrid":
        """Sample ``fn(points) -> distances`` on a lattice spanning ``[lo, hi]``.

        ``hi`` is only used to derive the spacing along the first axis, so the
        box must be compatible with a uniform spacing.
        """
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        res = _as_resolution(resolution, lo.size)
        spacing = (hi[0] - lo[0]) / (res[0] - 1)
        grid = cls(np.zeros(res, dtype=dtype), lo, spacing)
        values = fn(grid.vertex_positions().reshape(-1, lo.size))
        grid.values = np.asarray(values, dtype=np.float64).reshape(res).astype(dtype)
        return grid

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def resolution(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def n_vertices(self) -> int:
        return int(self.values.size)

    @property
    def lo(self) -> np.ndarray:
        return self.origin.copy()

    @property
    def hi(self) -> np.ndarray:
        return self.origin + (np.array(self.resolution) - 1) * self.spacing

    @property
    def strides(self) -> np.ndarray:
        """Flat-index strides of the C-ordered ``values`` array."""
        res = self.values.shape
        return np.array([int(np.prod(res[k + 1 :])) for k in range(len(res))], dtype=np.int64)

    def copy(self) -> "SdfGrid":
        return SdfGrid(self.values.copy(), self.origin.copy(), self.spacing)

    def vertex_positions(self) -> np.ndarray:
        axes = [self.origin[a] + np.arange(r) * self.spacing for a, r in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        return np.asarray(ijk, dtype=np.int64) @ self.strides


def _as_resolution(resolution, dim: int) -> tuple[int, ...]:
    if np.isscalar(resolution):
        return (int(resolution),) * dim
    res = tuple(int(r) for r in resolution)
    if len(res) != dim:
        raise InvalidResolution(f"expected {dim} resolutions, got {len(res)}")
    return res


def to_lattice(grid: SdfGrid, x) -> np.ndarray:
    """World points ``(..., d)`` -> continuous lattice coordinates, clamped.

    Raises QueryOutsideGrid if a point lies outside the box by more than
    ``CLAMP_TOL`` lattice units.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != grid.dim:
        raise QueryOutsideGrid(f"point dimension {x.shape[-1]} != grid dimension {grid.dim}")
    u = (x - grid.origin) / grid.spacing
    upper = np.array(grid.resolution, dtype=np.float64) - 1.0
    bad = (u < -CLAMP_TOL) | (u > upper + CLAMP_TOL) | ~np.isfinite(u)
    if np.any(bad):
        where = np.argwhere(bad.any(axis=-1))[0]
        raise QueryOutsideGrid(f"query {x[tuple(where)]} outside grid box [{grid.lo}, {grid.hi}]")
    return np.clip(u, 0.0, upper)


def locate(grid: SdfGrid, x) -> tuple[np.ndarray, np.ndarray]:
    """Owner cube base index and fractional offset for each point.

    A point on a shared face belongs to the cube on its larger-index side,
    except on the last lattice plane where the base is clamped to ``R - 2``.
    """
    u = to_lattice(grid, x)
    base = np.floor(u).astype(np.int64)
    base = np.minimum(base, np.array(grid.resolution, dtype=np.int64) - 2)
    return base, u - base


def cube_weights(frac: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """d-linear corner weights and their lattice-space derivatives.

    Returns ``w`` of shape ``(..., 2**d)`` and ``dw`` of shape
    ``(..., 2**d, d)`` where ``dw[..., i, k] = d w_i / d u_k``.
    """
    dim = frac.shape[-1]
    off = corner_offsets(dim)
    # per-axis factor: frac for the upper corner, 1 - frac for the lower one
    lohi = np.stack([1.0 - frac, frac], axis=-1)  # (..., d, 2)
    factors = [lohi[..., k, off[:, k]] for k in range(dim)]  # each (..., 2**d)
    signs = np.where(off == 1, 1.0, -1.0)
    w = factors[0].copy()
    for k in range(1, dim):
        w *= factors[k]
    dw = np.empty(w.shape + (dim,), dtype=np.float64)
    for k in range(dim):
        prod = np.broadcast_to(signs[:, k], w.shape).copy()
        for j in range(dim):
            if j != k:
                prod *= factors[j]
        dw[..., k] = prod
    return w, dw


@dataclass
class InterpolationSample:
    """Everything d-linear interpolation produced for a batch of points."""

    x: np.ndarray
    base: np.ndarray  # (..., d) owner-cube base vertex
    corners: np.ndarray  # (..., 2**d, d) integer corner coordinates
    corner_ids: np.ndarray  # (..., 2**d) flat vertex indices
    weights: np.ndarray  # (..., 2**d)
    weight_grads: np.ndarray  # (..., 2**d, d) in world units
    value: np.ndarray  # (...)


def interpolate(grid: SdfGrid, x, base=None) -> InterpolationSample:
    """d-linear interpolation of the grid at world points ``x``.

    ``base`` overrides the owner-cube rule; used to take one-sided limits on
    cube faces. Points must then lie in the closure of the given cube.
    """
    x = np.asarray(x, dtype=np.float64)
    if base is None:
        base, frac = locate(grid, x)
    else:
        base = np.broadcast_to(np.asarray(base, dtype=np.int64), x.shape)
        frac = to_lattice(grid, x) - base
    w, dw = cube_weights(frac)
    corners = base[..., None, :] + corner_offsets(grid.dim)
    ids = corners @ grid.strides
    vals = grid.values.reshape(-1)[ids].astype(np.float64)
    return InterpolationSample(
        x=x,
        base=base,
        corners=corners,
        corner_ids=ids,
        weights=w,
        weight_grads=dw / grid.spacing,
        value=np.sum(w * vals, axis=-1),
    )


def analytical_gradient(grid: SdfGrid, x, base=None) -> np.ndarray:
    """Exact spatial derivative of the d-linear interpolant (world units)."""
    s = interpolate(grid, x, base)
    vals = grid.values.reshape(-1)[s.corner_ids].astype(np.float64)
    return np.einsum("...ik,...i->...k", s.weight_grads, vals)


def _stencil(grid: SdfGrid, corners: np.ndarray):
    """Central-difference stencil for vertices ``corners`` (..., d).

    Returns flat ids of the plus/minus neighbours along every axis, shape
    ``(..., d)``, and the per-axis scale ``1 / (span * spacing)``. Boundary
    vertices fall back to one-sided differences (span 1 instead of 2).
    """
    res = np.array(grid.resolution, dtype=np.int64)
    eye = np.eye(grid.dim, dtype=np.int64)
    c = corners[..., None, :]  # (..., d_axis, d)
    ck = corners  # coordinate along the axis itself
    plus_shift = (ck < res - 1).astype(np.int64)
    minus_shift = (ck > 0).astype(np.int64)
    plus = c + eye * plus_shift[..., :, None]
    minus = c - eye * minus_shift[..., :, None]
    span = plus_shift + minus_shift
    scale = 1.0 / (span * grid.spacing)
    return plus @ grid.strides, minus @ grid.strides, scale


def vertex_gradients(grid: SdfGrid) -> np.ndarray:
    """Finite-difference gradient at every vertex, shape ``resolution + (d,)``.

    Interior vertices use central differences, boundary vertices one-sided
    differences so the field is defined everywhere.
    """
    if min(grid.resolution) < 3:
        raise GridTooSmall(f"vertex gradients need >= 3 vertices per axis, got {grid.resolution}")
    f = grid.values.astype(np.float64)
    h = grid.spacing
    out = np.empty(grid.resolution + (grid.dim,), dtype=np.float64)
    for k in range(grid.dim):
        g = np.empty_like(f)
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        mid = [slice(None)] * grid.dim
        lo[k], hi[k], mid[k] = slice(None, -2), slice(2, None), slice(1, -1)
        g[tuple(mid)] = (f[tuple(hi)] - f[tuple(lo)]) / (2.0 * h)
        first, second = [slice(None)] * grid.dim, [slice(None)] * grid.dim
        first[k], second[k] = 0, 1
        g[tuple(first)] = (f[tuple(second)] - f[tuple(first)]) / h
        last, prev = [slice(None)] * grid.dim, [slice(None)] * grid.dim
        last[k], prev[k] = -1, -2
        g[tuple(last)] = (f[tuple(last)] - f[tuple(prev)]) / h
        out[..., k] = g
    return out


def interpolated_gradient(grid: SdfGrid, x, n=None, base=None) -> np.ndarray:
    """d-linear blend of the vertex gradients ``n`` at world points ``x``."""
    if n is None:
        n = vertex_gradients(grid)
    s = interpolate(grid, x, base)
    nv = n.reshape(-1, grid.dim)[s.corner_ids]  # (..., 2**d, d)
    return np.einsum("...i,...ik->...k", s.weights, nv)


def gradient_sample(grid: SdfGrid, x, n=None) -> dict[str, np.ndarray]:
    """Both estimators plus the corner vertex gradients at ``x``."""
    if n is None:
        n = vertex_gradients(grid)
    s = interpolate(grid, x)
    nv = n.reshape(-1, grid.dim)[s.corner_ids]
    vals = grid.values.reshape(-1)[s.corner_ids].astype(np.float64)
    return {
        "analytical": np.einsum("...ik,...i->...k", s.weight_grads, vals),
        "vertex_gradients": nv,
        "interpolated": np.einsum("...i,...ik->...k", s.weights, nv),
    }


# --- adjoints -------------------------------------------------------------


def backprop_value(grid: SdfGrid, x, upstream, sample: InterpolationSample | None = None):
    """Adjoint of :func:`interpolate`: vertex ids and ``upstream * w_i``.

    Returns flat arrays ``(ids, contributions)``; ids may repeat across
    points. Use :func:`coalesce` or :func:`scatter_dense` to combine them.
    """
    s = sample if sample is not None else interpolate(grid, x)
    up = np.asarray(upstream, dtype=np.float64)[..., None]
    return s.corner_ids.reshape(-1), (up * s.weights).reshape(-1)


def backprop_analytical_gradient(grid: SdfGrid, x, upstream, sample: InterpolationSample | None = None):
    """Adjoint of :func:`analytical_gradient` w.r.t. the vertex values."""
    s = sample if sample is not None else interpolate(grid, x)
    up = np.asarray(upstream, dtype=np.float64)
    contrib = np.einsum("...ik,...k->...i", s.weight_grads, up)
    return s.corner_ids.reshape(-1), contrib.reshape(-1)


def backprop_interpolated_gradient(grid: SdfGrid, x, upstream, sample: InterpolationSample | None = None):
    """Adjoint of :func:`interpolated_gradient` w.r.t. the vertex values.

    For corner ``c_i`` and axis ``k`` the vertex gradient is
    ``(f[plus] - f[minus]) * scale``, so ``upstream_k * w_i * scale`` lands
    on ``plus`` and its negation on ``minus``. At most ``2**d * 2d`` entries
    per point (32 distinct vertices in 3D).
    """
    s = sample if sample is not None else interpolate(grid, x)
    up = np.asarray(upstream, dtype=np.float64)
    plus, minus, scale = _stencil(grid, s.corners)  # (..., 2**d, d)
    coef = s.weights[..., None] * up[..., None, :] * scale
    ids = np.concatenate([plus.reshape(-1), minus.reshape(-1)])
    vals = np.concatenate([coef.reshape(-1), -coef.reshape(-1)])
    return ids, vals


def vertex_gradients_adjoint(grid: SdfGrid, d_n: np.ndarray) -> np.ndarray:
    """Transpose of :func:`vertex_gradients`: flat dense ``dL/df`` given
    ``d_n`` of shape ``resolution + (d,)``."""
    h = grid.spacing
    out = np.zeros(grid.resolution, dtype=np.float64)
    for k in range(grid.dim):
        g = d_n[..., k]

        def sl(i):
            idx = [slice(None)] * grid.dim
            idx[k] = i
            return tuple(idx)

        mid = g[sl(slice(1, -1))] / (2.0 * h)
        out[sl(slice(2, None))] += mid
        out[sl(slice(None, -2))] -= mid
        first, last = g[sl(0)] / h, g[sl(-1)] / h
        out[sl(1)] += first
        out[sl(0)] -= first
        out[sl(-1)] += last
        out[sl(-2)] -= last
    return out.reshape(-1)


def backprop_interpolated_gradient_dense(grid: SdfGrid, x, upstream, sample: InterpolationSample | None = None):
    """Same adjoint as :func:`backprop_interpolated_gradient`, returned as a
    dense flat array: scatter into per-vertex gradient adjoints first, then
    apply the stencil transpose once for the whole grid."""
    s = sample if sample is not None else interpolate(grid, x)
    up = np.asarray(upstream, dtype=np.float64)
    ids = s.corner_ids.reshape(-1)
    coef = (s.weights[..., None] * up[..., None, :]).reshape(-1, grid.dim)
    d_n = np.stack(
        [np.bincount(ids, weights=coef[:, k], minlength=grid.n_vertices) for k in range(grid.dim)],
        axis=-1,
    )
    return vertex_gradients_adjoint(grid, d_n.reshape(grid.resolution + (grid.dim,)))


def coalesce(ids: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum contributions that share a vertex id; ids come back sorted."""
    uniq, inv = np.unique(ids, return_inverse=True)
    return uniq, np.bincount(inv, weights=vals, minlength=uniq.size)


def scatter_dense(n_vertices: int, ids: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Deterministic dense accumulation of sparse contributions."""
    return np.bincount(ids, weights=vals, minlength=n_vertices)


# --- resampling -----------------------------------------------------------


def upsample(grid: SdfGrid, new_resolution) -> SdfGrid:
    """Resample onto a finer lattice spanning the same box.

    New vertex values are d-linear interpolations of the old grid.
    """
    res = _as_resolution(new_resolution, grid.dim)
    old = grid.resolution
    if any(r <= o for r, o in zip(res, old)):
        raise InvalidResolution(f"new resolution {res} must exceed {old} on every axis")
    extent = (np.array(old) - 1) * grid.spacing
    spacings = extent / (np.array(res) - 1)
    if not np.allclose(spacings, spacings[0], rtol=1e-12, atol=0):
        raise InvalidResolution(f"resolution {res} gives non-uniform spacing for box {extent}")
    out = SdfGrid(np.zeros(res, dtype=grid.values.dtype), grid.origin, spacings[0])
    pos = out.vertex_positions()
    # float rounding can push the last plane a hair past the old box
    pos = np.clip(pos, grid.lo, grid.hi)
    out.values = interpolate(grid, pos).value.astype(grid.values.dtype)
    return out


def gaussian_kernel(sigma: float, spacing: float) -> np.ndarray:
    radius = int(math.ceil(2.0 * sigma / spacing))
    offsets = np.arange(-radius, radius + 1) * spacing
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def gaussian_filter(grid: SdfGrid, sigma: float) -> SdfGrid:
    """Separable truncated Gaussian blur, radius ``ceil(2 sigma / spacing)``.

    Edges are clamped (nearest-vertex padding). ``sigma == 0`` is the
    identity.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    out = grid.copy()
    if sigma == 0:
        return out
    kernel = gaussian_kernel(sigma, grid.spacing)
    v = grid.values.astype(np.float64)
    for axis in range(grid.dim):
        v = ndimage.correlate1d(v, kernel, axis=axis, mode="nearest")
    out.values = v.astype(grid.values.dtype)
    return out


# --- serialization --------------------------------------------------------


def save_grid(grid: SdfGrid, path) -> None:
    """Little-endian: magic, u32 dim, u32 resolutions, f64 origin + spacing,
    then f32 values with x varying fastest."""
    header = _MAGIC + struct.pack("<I", grid.dim)
    header += struct.pack(f"<{grid.dim}I", *grid.resolution)
    header += struct.pack(f"<{grid.dim + 1}d", *grid.origin, grid.spacing)
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path) -> SdfGrid:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an SDF grid file")
    (dim,) = struct.unpack_from("<I", data, 4)
    off = 8
    res = struct.unpack_from(f"<{dim}I", data, off)
    off += 4 * dim
    nums = struct.unpack_from(f"<{dim + 1}d", data, off)
    off += 8 * (dim + 1)
    count = int(np.prod(res))
    values = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    values = np.ascontiguousarray(values.reshape(res, order="F"), dtype=np.float32)
    return SdfGrid(values, np.array(nums[:dim]), nums[dim])
