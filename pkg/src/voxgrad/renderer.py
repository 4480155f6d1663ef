"""SDF volume rendering along rays with a hand-written backward pass.

Per segment the opacity is

    alpha = max((Phi(f - d/2 cos) - Phi(f + d/2 cos)) / Phi(f - d/2 cos), 0)

with ``Phi(z) = sigmoid(s z)``, ``f`` the interpolated SDF at the segment
midpoint, ``d`` the segment length and ``cos`` the cosine between the SDF
gradient and the ray direction. Segments are alpha-composited front to back
over a solid background.

The backward pass reaches the grid through three routes: the SDF value, the
gradient inside ``cos``, and the normal handed to the color decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from voxgrad.errors import NoIntersection
from voxgrad.radiance import RadianceGrad, RadianceParams, ShadeCache, backprop_shade, shade
from voxgrad.sdf_grid import (
    InterpolationSample,
    SdfGrid,
    backprop_analytical_gradient,
    backprop_interpolated_gradient_dense,
    backprop_value,
    interpolate,
)

DENOM_FLOOR = 1e-6
NORM_FLOOR = 1e-12


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = 0.0


@dataclass
class RenderConfig:
    n_samples: int = 128
    gradient: str = "interpolated"  # or "analytical"
    normalize_cos: bool = True
    normal_to_radiance: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if self.gradient not in ("interpolated", "analytical"):
            raise ValueError(f"unknown gradient estimator {self.gradient!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


def intersect_aabb(origins, dirs, lo, hi):
    """Slab test. Returns ``(near, far, hit)`` per ray; near is clipped at 0."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    near = np.maximum(tmin.max(axis=-1), 0.0)
    far = tmax.min(axis=-1)
    hit = far > near
    return near, far, hit


def sample_ray(ray: Ray, lo, hi, n_samples: int, jitter: float = 0.5) -> Ray:
    """Fill ``ray.near/far`` from the box; returns the ray with samples
    available through :func:`segment_midpoints`."""
    near, far, hit = intersect_aabb(ray.origin, ray.direction, lo, hi)
    if not hit[0]:
        raise NoIntersection(f"ray from {ray.origin} along {ray.direction} misses the box")
    ray.near, ray.far = float(near[0]), float(far[0])
    return ray


def segment_midpoints(near, far, n_samples: int, jitter=0.5):
    """Evenly spaced sample distances ``(B, n)`` and lengths ``(B,)``.

    ``jitter`` in [0, 1) shifts every sample of a ray by the same fraction of
    a segment; 0.5 gives exact segment midpoints.
    """
    near = np.atleast_1d(near)
    far = np.atleast_1d(far)
    delta = (far - near) / n_samples
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), near.shape)
    t = near[:, None] + (np.arange(n_samples)[None, :] + jitter[:, None]) * delta[:, None]
    return t, delta


def neus_alpha(f, cos, delta, s):
    """Discrete opacity from SDF value, ray/normal cosine and segment length."""
    return _alpha_parts(np.asarray(f, float), np.asarray(cos, float), np.asarray(delta, float), s)[0]


def _alpha_parts(f, cos, delta, s):
    half = 0.5 * delta * cos
    prev, nxt = f - half, f + half
    phi_p, phi_n = expit(s * prev), expit(s * nxt)
    den = np.maximum(phi_p, DENOM_FLOOR)
    raw = (phi_p - phi_n) / den
    alpha = np.clip(raw, 0.0, 1.0)
    return alpha, raw, prev, nxt, phi_p, phi_n, den


def _alpha_backward(f, cos, delta, s, d_alpha):
    """d alpha w.r.t. (f, cos, s) scaled by ``d_alpha``."""
    alpha, raw, prev, nxt, phi_p, phi_n, den = _alpha_parts(f, cos, delta, s)
    active = (raw > 0.0) & (raw < 1.0)
    floored = phi_p < DENOM_FLOOR
    d_phi_p = np.where(floored, 1.0 / DENOM_FLOOR, phi_n / (den * den))
    d_phi_n = -1.0 / den
    g = np.where(active, d_alpha, 0.0)
    # sigmoid'(s z) = expit(sz) * expit(-sz), stable for large |sz|
    sp = expit(s * prev) * expit(-s * prev)
    sn = expit(s * nxt) * expit(-s * nxt)
    a = g * d_phi_p * sp
    b = g * d_phi_n * sn
    d_f = s * (a + b)
    d_cos = 0.5 * delta * s * (b - a)
    d_s = np.sum(a * prev + b * nxt)
    return d_f, d_cos, d_s


def composite(alpha, colors, background):
    """Front-to-back blending.

    Returns ``(color, opacity, transmittance, weights)``; residual
    transmittance ``1 - sum(weights)`` shows the background.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    trans = np.cumprod(np.concatenate([np.ones(alpha.shape[:-1] + (1,)), 1.0 - alpha], axis=-1), axis=-1)
    T = trans[..., :-1]
    w = T * alpha
    acc = w.sum(axis=-1)
    color = np.einsum("...i,...ic->...c", w, colors) + trans[..., -1:] * np.asarray(background)
    return color, acc, T, w


def composite_backward(alpha, T, colors, background, d_color, d_opacity=None):
    """Adjoint of :func:`composite`.

    ``dC/d alpha_i = T_i (c_i - R_i)`` where ``R_i`` is the color seen from
    just behind segment i, built by a back-to-front recursion so it never
    divides by ``1 - alpha``.
    """
    n = alpha.shape[-1]
    chans = [colors]
    bg = [np.broadcast_to(np.asarray(background, dtype=np.float64), colors.shape[:-2] + (colors.shape[-1],))]
    up = [d_color]
    if d_opacity is not None:
        # opacity is the same blend with unit color over a zero background
        chans.append(np.ones(colors.shape[:-1] + (1,)))
        bg.append(np.zeros(colors.shape[:-2] + (1,)))
        up.append(np.asarray(d_opacity, dtype=np.float64)[..., None])
    c = np.concatenate(chans, axis=-1)
    g = np.concatenate(up, axis=-1)
    behind = np.empty_like(c)
    r = np.concatenate(bg, axis=-1)
    for i in range(n - 1, -1, -1):
        behind[..., i, :] = r
        a = alpha[..., i, None]
        r = a * c[..., i, :] + (1.0 - a) * r
    d_alpha = T * np.einsum("...ic,...c->...i", c - behind, g)
    d_colors = (T * alpha)[..., None] * d_color[..., None, :]
    return d_alpha, d_colors


@dataclass
class RenderCache:
    """Forward state kept for the backward pass (hit rays only)."""

    hit: np.ndarray
    dirs: np.ndarray  # (B, 3) unit directions of hit rays
    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray  # (B, n, 3)
    sample: InterpolationSample
    f: np.ndarray
    grad: np.ndarray
    norm: np.ndarray
    cos: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    weights: np.ndarray
    colors: np.ndarray
    shade_cache: ShadeCache | None
    s: float


@dataclass
class RenderResult:
    color: np.ndarray  # (B, 3)
    opacity: np.ndarray  # (B,)
    cache: RenderCache | None = field(repr=False, default=None)


def render_rays(
    grid: SdfGrid,
    vertex_grads: np.ndarray,
    params: RadianceParams,
    log_s: float,
    origins,
    dirs,
    config: RenderConfig,
    rng: np.random.Generator | None = None,
) -> RenderResult:
    """Render a batch of rays. Rays that miss the grid box show background.

    With ``rng`` every ray gets a random sample offset; without it samples
    sit on segment midpoints, so output is fully deterministic.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    bg = np.asarray(config.background, dtype=np.float64)
    n_rays = origins.shape[0]
    near, far, hit = intersect_aabb(origins, dirs, grid.lo, grid.hi)
    jitter = rng.random(n_rays) if rng is not None else np.full(n_rays, 0.5)

    color = np.tile(bg, (n_rays, 1))
    opacity = np.zeros(n_rays)
    if not hit.any():
        return RenderResult(color, opacity, None)

    o, v = origins[hit], dirs[hit]
    t, delta = segment_midpoints(near[hit], far[hit], config.n_samples, jitter[hit])
    pts = o[:, None, :] + t[..., None] * v[:, None, :]
    sample = interpolate(grid, pts)
    f = sample.value
    if config.gradient == "interpolated":
        nv = vertex_grads.reshape(-1, grid.dim)[sample.corner_ids]
        grad = np.einsum("...i,...ik->...k", sample.weights, nv)
    else:
        vals = grid.values.reshape(-1)[sample.corner_ids].astype(np.float64)
        grad = np.einsum("...ik,...i->...k", sample.weight_grads, vals)
    norm = np.linalg.norm(grad, axis=-1)
    ok = norm > NORM_FLOOR
    unit = grad / np.where(ok, norm, 1.0)[..., None]
    vb = np.broadcast_to(v[:, None, :], grad.shape)
    if config.normalize_cos:
        cos = np.where(ok, np.einsum("...k,...k->...", unit, vb), -1.0)
    else:
        cos = np.einsum("...k,...k->...", grad, vb)
    s = float(np.exp(log_s))
    alpha = neus_alpha(f, cos, delta[:, None], s)

    if config.normal_to_radiance:
        normal = np.where(ok[..., None], unit, -vb)
    else:
        # decoder never sees geometry: color cannot push on the grid
        normal = np.zeros_like(grad)
    rgb, shade_cache = shade(params, pts.reshape(-1, 3), vb.reshape(-1, 3), normal.reshape(-1, 3))
    rgb = rgb.reshape(pts.shape)
    c, acc, T, w = composite(alpha, rgb, bg)
    color[hit] = c
    opacity[hit] = acc
    cache = RenderCache(
        hit=hit,
        dirs=v,
        t=t,
        delta=delta,
        points=pts,
        sample=sample,
        f=f,
        grad=grad,
        norm=norm,
        cos=cos,
        alpha=alpha,
        T=T,
        weights=w,
        colors=rgb,
        shade_cache=shade_cache,
        s=s,
    )
    return RenderResult(color, opacity, cache)


@dataclass
class RenderGrad:
    grid_ids: np.ndarray  # flat vertex ids, may repeat
    grid_vals: np.ndarray
    radiance: RadianceGrad | None
    d_log_s: float
    # the part of grid_ids/grid_vals that came through the decoder's normal input
    normal_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    normal_vals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def dense_grid(self, n_vertices: int) -> np.ndarray:
        return np.bincount(self.grid_ids, weights=self.grid_vals, minlength=n_vertices)


def backprop_rays(
    grid: SdfGrid,
    params: RadianceParams,
    result: RenderResult,
    d_color,
    config: RenderConfig,
    d_opacity=None,
) -> RenderGrad:
    """Gradients of ``sum(d_color * color) + sum(d_opacity * opacity)``."""
    cache = result.cache
    if cache is None:
        return RenderGrad(np.zeros(0, np.int64), np.zeros(0), None, 0.0)
    hit = cache.hit
    d_color = np.asarray(d_color, dtype=np.float64)[hit]
    d_op = None if d_opacity is None else np.asarray(d_opacity, dtype=np.float64)[hit]
    bg = np.asarray(config.background, dtype=np.float64)

    d_alpha, d_rgb = composite_backward(cache.alpha, cache.T, cache.colors, bg, d_color, d_op)
    rad = backprop_shade(params, cache.shade_cache, d_rgb.reshape(-1, 3))
    d_f, d_cos, d_s = _alpha_backward(cache.f, cache.cos, cache.delta[:, None], cache.s, d_alpha)

    ok = cache.norm > NORM_FLOOR
    safe = np.where(ok, cache.norm, 1.0)[..., None]
    unit = cache.grad / safe
    vb = np.broadcast_to(cache.dirs[:, None, :], cache.grad.shape)
    if config.normalize_cos:
        cos_n = np.einsum("...k,...k->...", unit, vb)
        d_grad = (vb - cos_n[..., None] * unit) / safe * d_cos[..., None]
    else:
        d_grad = vb * d_cos[..., None]
    d_grad = np.where(ok[..., None], d_grad, 0.0)
    n_v = grid.n_vertices
    ids_v, vals_v = backprop_value(grid, None, d_f, sample=cache.sample)
    dense = np.bincount(ids_v, weights=vals_v, minlength=n_v)
    dense += _grad_route(grid, cache.sample, d_grad, config.gradient)
    normal = np.zeros(n_v)
    if config.normal_to_radiance:
        dn = rad.d_normal.reshape(cache.grad.shape)
        d_grad_n = (dn - np.einsum("...k,...k->...", dn, unit)[..., None] * unit) / safe
        d_grad_n = np.where(ok[..., None], d_grad_n, 0.0)
        normal = _grad_route(grid, cache.sample, d_grad_n, config.gradient)
        dense += normal
    ids = np.flatnonzero(dense)
    ids_n = np.flatnonzero(normal)
    return RenderGrad(
        grid_ids=ids,
        grid_vals=dense[ids],
        radiance=rad,
        d_log_s=float(d_s * cache.s),
        normal_ids=ids_n,
        normal_vals=normal[ids_n],
    )


def _grad_route(grid: SdfGrid, sample: InterpolationSample, d_grad: np.ndarray, estimator: str) -> np.ndarray:
    """Dense flat ``dL/df`` through whichever gradient estimator is active."""
    if estimator == "interpolated":
        return backprop_interpolated_gradient_dense(grid, None, d_grad, sample=sample)
    ids, vals = backprop_analytical_gradient(grid, None, d_grad, sample=sample)
    return np.bincount(ids, weights=vals, minlength=grid.n_vertices)


def render_ray(grid, vertex_grads, params, log_s, ray: Ray, config: RenderConfig, rng=None):
    """Single-ray convenience wrapper; raises NoIntersection on a miss."""
    sample_ray(ray, grid.lo, grid.hi, config.n_samples)
    res = render_rays(grid, vertex_grads, params, log_s, ray.origin, ray.direction, config, rng)
    return res.color[0], res
