"""Optimization loop for the SDF grid and the radiance field.

One step renders a random ray batch, backpropagates the photometric (and
optional mask) loss, adds the closed-form regularizer gradients on the touched
vertices, and applies Adam. The grid and the hash tables use a sparse Adam
that only visits entries with a nonzero gradient; bias correction uses each
entry's own update count, so an entry updated every step follows dense Adam
exactly and an untouched entry never moves.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from voxgrad._kernels import sparse_adam
from voxgrad.errors import NumericFailure, ShapeMismatch
from voxgrad.fileio import read_csv, write_csv
from voxgrad.radiance import RadianceConfig, RadianceParams, init_params, load_params, save_params
from voxgrad.regularizer import accumulate, regularize
from voxgrad.renderer import RenderConfig, backprop_rays, render_rays
from voxgrad.scenes import AnalyticScene, Camera, make_rig, render_ground_truth
from voxgrad.sdf_grid import SdfGrid, load_grid, save_grid, upsample, vertex_gradients

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "L_RGB", "L_eik", "L_curv", "s", "psnr"]
OPACITY_CLAMP = 1e-6


# --- schedules --------------------------------------------------------------


@dataclass
class Schedules:
    total_steps: int = 3000
    milestones: list = field(default_factory=lambda: [[0, 32], [1000, 64], [2000, 96]])
    w_eik_start: float = 1e-2
    w_eik_end: float = 1e-3
    w_curv_start: float = 1e-8
    w_curv_peak: float = 5e-6
    w_curv_end: float = 5e-7
    hold_end: float = 11 / 40  # fraction of training with constant weights
    ramp_end: float = 21 / 40  # end of the linear phase
    k: float = 5.0
    w_mask: float = 0.0
    lr_grid: float = 1e-2
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-3
    lr_log_s: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    lr_decay: float = 1.0  # all learning rates reach this multiple at the last step (geometric)

    def __post_init__(self) -> None:
        self.milestones = [[int(s), int(r)] for s, r in self.milestones]
        steps = [s for s, _ in self.milestones]
        if not steps or steps[0] != 0:
            raise ValueError("the first resolution milestone must be at step 0")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("milestone steps must be strictly increasing")
        res = [r for _, r in self.milestones]
        if any(b <= a for a, b in zip(res, res[1:])) or res[0] < 3:
            raise ValueError("milestone resolutions must increase and start at >= 3")
        if self.k < 1:
            raise ValueError(f"amplification factor k must be >= 1, got {self.k}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        weights = [self.w_eik_start, self.w_eik_end, self.w_curv_start, self.w_curv_peak, self.w_curv_end, self.w_mask]
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_curv_end <= 0 or self.w_curv_peak <= 0:
            raise ValueError("geometric decay needs positive curvature weights")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not (0.0 <= self.hold_end <= self.ramp_end <= 1.0):
            raise ValueError("need 0 <= hold_end <= ramp_end <= 1")

    def progress(self, step: int) -> float:
        return step / (self.total_steps - 1) if self.total_steps > 1 else 0.0


def weights_at(sched: Schedules, p: float) -> tuple[float, float]:
    """Eikonal and curvature weights at training progress ``p`` in [0, 1].

    Both hold until ``hold_end``, move linearly until ``ramp_end``; after it
    the Eikonal weight stays put and the curvature weight decays
    geometrically to its final value at ``p = 1``.
    """
    a, b = sched.hold_end, sched.ramp_end
    if p <= a:
        return sched.w_eik_start, sched.w_curv_start
    if p <= b:
        r = (p - a) / (b - a)
        return (
            sched.w_eik_start + r * (sched.w_eik_end - sched.w_eik_start),
            sched.w_curv_start + r * (sched.w_curv_peak - sched.w_curv_start),
        )
    r = min((p - b) / (1.0 - b), 1.0) if b < 1.0 else 1.0
    return sched.w_eik_end, sched.w_curv_peak * (sched.w_curv_end / sched.w_curv_peak) ** r


def schedule_tick(sched: Schedules, step: int) -> tuple[float, float, int | None]:
    """``(w_eik, w_curv, new_resolution)``; the resolution is set only on the
    step where a milestone starts (and for step 0)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w_eik, w_curv = weights_at(sched, sched.progress(step))
    new_res = next((r for s, r in sched.milestones if s == step), None)
    return w_eik, w_curv, new_res


def lr_scale(sched: Schedules, step: int) -> float:
    return sched.lr_decay ** sched.progress(step)


def resolution_at(sched: Schedules, step: int) -> int:
    return [r for s, r in sched.milestones if s <= step][-1]


def amplify_s_gradient(g: float, k: float) -> float:
    """Scale the ln s gradient by ``k`` when it is negative (pushes s up)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return k * g if g < 0 else g


# --- loss -------------------------------------------------------------------


def loss(pred, target, opacity=None, mask=None, w_mask: float = 0.0):
    """``L_RGB + w_mask * L_mask`` and the upstream gradients.

    ``L_RGB`` is the mean absolute color error over rays and channels;
    ``L_mask`` the mean binary cross-entropy between the clamped opacity and
    the mask. Returns ``(L, d_color, d_opacity, parts)`` where ``d_opacity``
    is None when the mask term is off.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    l_rgb = float(np.mean(np.abs(diff)))
    d_color = np.sign(diff) / diff.size
    parts = {"L_RGB": l_rgb, "L_mask": 0.0}
    d_opacity = None
    total = l_rgb
    if w_mask > 0 and mask is not None:
        op = np.asarray(opacity, dtype=np.float64)
        m = np.asarray(mask, dtype=np.float64)
        if op.shape != m.shape or op.shape[0] != pred.shape[0]:
            raise ShapeMismatch(f"opacity {op.shape} vs mask {m.shape}")
        o = np.clip(op, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
        l_mask = float(np.mean(-(m * np.log(o) + (1.0 - m) * np.log1p(-o))))
        inside = (op > OPACITY_CLAMP) & (op < 1.0 - OPACITY_CLAMP)
        d_opacity = np.where(inside, w_mask * (-m / o + (1.0 - m) / (1.0 - o)) / op.size, 0.0)
        parts["L_mask"] = l_mask
        total += w_mask * l_mask
    return total, d_color, d_opacity, parts


def psnr(pred, target) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: np.ndarray  # per-row update count (sparse) or a 0-d count (dense)

    @classmethod
    def zeros(cls, shape, rows: int | None = None) -> "AdamState":
        count = np.zeros(rows if rows is not None else (), dtype=np.int64)
        return cls(np.zeros(shape), np.zeros(shape), count)


def sparse_adam_step(param, ids, grads, state: AdamState, lr, beta1=0.9, beta2=0.99, eps=1e-15) -> None:
    """In-place Adam on rows ``ids`` of ``param`` (viewed as ``(rows, -1)``).

    ``ids`` must be unique; ``grads`` has one row per id. Rows not listed are
    not read or written. Bias correction uses each row's own update count.
    """
    if len(ids) == 0:
        return
    p = param.reshape(len(state.count), -1)
    m = state.m.reshape(p.shape)
    v = state.v.reshape(p.shape)
    g = np.ascontiguousarray(grads, dtype=np.float64).reshape(len(ids), -1)
    sparse_adam(p, m, v, state.count, np.asarray(ids, dtype=np.int64), g, float(lr), beta1, beta2, eps)


def dense_adam_step(param, grad, state: AdamState, lr, beta1=0.9, beta2=0.99, eps=1e-15):
    """Textbook Adam; returns the updated parameter array."""
    g = np.asarray(grad, dtype=np.float64)
    state.count = state.count + 1
    t = int(state.count)
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**t)
    v_hat = state.v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


# --- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    scene: str = "sphere"  # builtin name or path to a scene JSON
    out: str | None = None
    seed: int = 0
    deterministic: bool = False
    threads: int = 1
    gradient: str = "interpolated"
    normal_to_radiance: bool = True
    n_views: int = 16
    width: int = 160
    height: int = 160
    batch_rays: int = 1024
    n_samples: int = 64
    fg_fraction: float = 0.5  # share of each batch drawn from mask pixels
    init_radius: float = 0.75  # initial SDF: sphere of this radius (x half-extent) about the box center
    roi_margin: float = 1.15  # non-mask rays cross a sphere this much larger than the initial one; 0 = anywhere
    log_s_init: float = math.log(20.0)
    radiance: dict = field(default_factory=dict)
    schedules: Schedules = field(default_factory=Schedules)
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.schedules, dict):
            self.schedules = schedules_from_dict(self.schedules)
        if self.gradient not in ("interpolated", "analytical"):
            raise ValueError(f"unknown gradient estimator {self.gradient!r}")
        if self.batch_rays < 1 or self.n_samples < 1 or self.n_views < 2:
            raise ValueError("batch_rays, n_samples must be >= 1 and n_views >= 2")
        if not (0.0 <= self.fg_fraction <= 1.0):
            raise ValueError("fg_fraction must be in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.deterministic:
            self.threads = 1
        RadianceConfig(**self.radiance)  # validates keys

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedules"] = asdict(self.schedules)
        return d


def _check_keys(cls, d: dict, what: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


def schedules_from_dict(d: dict) -> Schedules:
    _check_keys(Schedules, d, "schedule")
    return Schedules(**d)


def config_from_dict(d: dict) -> TrainConfig:
    _check_keys(TrainConfig, d, "config")
    d = dict(d)
    if "schedules" in d:
        d["schedules"] = schedules_from_dict(d["schedules"])
    return TrainConfig(**d)


def load_config(path) -> TrainConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def desk_config(scene: str = "sphere", steps: int = 300, **overrides) -> TrainConfig:
    """Short single-core preset: 32/48/64 ladder at 0/40/75% of ``steps``,
    a smaller ray batch and a grid learning rate raised to suit the short
    run; everything else keeps the defaults."""
    sched = Schedules(
        total_steps=steps,
        milestones=[[0, 32], [int(0.4 * steps), 48], [int(0.75 * steps), 64]],
        w_mask=0.1,
        lr_grid=2e-2,
    )
    cfg = dict(scene=scene, batch_rays=384, n_samples=48, n_views=24, schedules=sched)
    cfg.update(overrides)
    return TrainConfig(**cfg)


# --- state --------------------------------------------------------------------


@dataclass
class Dataset:
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3)
    masks: np.ndarray  # (V, H, W) bool
    origins: np.ndarray  # (V*H*W, 3)
    dirs: np.ndarray
    colors: np.ndarray  # (V*H*W, 3)
    fg: np.ndarray  # flat ids of mask pixels
    roi: np.ndarray | None = None  # flat ids of pixels whose ray crosses the region of interest

    @classmethod
    def render(cls, scene: AnalyticScene, n_views: int, width: int, height: int) -> "Dataset":
        cams = make_rig(scene, n_views, width, height)
        imgs, masks, origins, dirs = [], [], [], []
        for cam in cams:
            img, mask = render_ground_truth(scene, cam)
            o, d = cam.rays()
            imgs.append(img)
            masks.append(mask)
            origins.append(o.reshape(-1, 3))
            dirs.append(d.reshape(-1, 3))
        return cls.from_arrays(cams, np.stack(imgs), np.stack(masks), np.concatenate(origins), np.concatenate(dirs))

    @classmethod
    def from_arrays(cls, cams, images, masks, origins, dirs) -> "Dataset":
        masks = np.asarray(masks, dtype=bool)
        return cls(cams, images, masks, origins, dirs, images.reshape(-1, 3), np.flatnonzero(masks.reshape(-1)))


@dataclass
class TrainState:
    grid: SdfGrid
    params: RadianceParams
    log_s: float
    adam_grid: AdamState
    adam_tables: AdamState
    adam_layers: list[AdamState]
    adam_log_s: AdamState
    step: int = 0  # number of completed steps
    seed: int = 0

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s))


def init_state(scene: AnalyticScene, cfg: TrainConfig) -> TrainState:
    res0 = cfg.schedules.milestones[0][1]
    center = scene.center
    r0 = cfg.init_radius * 0.5 * scene.extent
    grid = SdfGrid.from_function(
        lambda p: np.linalg.norm(p - center, axis=-1) - r0, res0, scene.lo, scene.lo + scene.extent
    )
    rng = np.random.default_rng(cfg.seed)
    params = init_params(RadianceConfig(**cfg.radiance), scene.lo, scene.lo + scene.extent, rng)
    return TrainState(
        grid=grid,
        params=params,
        log_s=float(cfg.log_s_init),
        adam_grid=AdamState.zeros(grid.n_vertices, grid.n_vertices),
        adam_tables=_table_adam(params),
        adam_layers=[AdamState.zeros(a.shape) for a in params.layers],
        adam_log_s=AdamState.zeros(()),
        seed=cfg.seed,
    )


def _table_adam(params: RadianceParams) -> AdamState:
    rows = params.tables.shape[0] * params.tables.shape[1]
    return AdamState.zeros(params.tables.shape, rows)


# --- one step -----------------------------------------------------------------


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so resuming needs nothing but the step index."""
    return np.random.default_rng([seed, step])


def region_of_interest(data: Dataset, center, radius: float) -> np.ndarray:
    """Pixels whose ray passes within ``radius`` of ``center``."""
    q = data.origins - center
    t = np.maximum(-np.sum(q * data.dirs, axis=-1), 0.0)
    dist = np.linalg.norm(q + t[:, None] * data.dirs, axis=-1)
    return np.flatnonzero(dist < radius)


def sample_batch(data: Dataset, cfg: TrainConfig, rng) -> np.ndarray:
    """``fg_fraction`` of the rays from mask pixels, the rest uniform over the
    region of interest (all pixels when none is set)."""
    n_fg = int(round(cfg.fg_fraction * cfg.batch_rays)) if len(data.fg) else 0
    fg = data.fg[rng.integers(len(data.fg), size=n_fg)] if n_fg else np.zeros(0, np.int64)
    pool = data.roi if data.roi is not None and len(data.roi) else None
    n_rest = cfg.batch_rays - n_fg
    rest = pool[rng.integers(len(pool), size=n_rest)] if pool is not None else rng.integers(len(data.colors), size=n_rest)
    return np.concatenate([fg, rest])


def _render_and_backprop(state, vg, origins, dirs, target, mask, rcfg, cfg, rng):
    result = render_rays(state.grid, vg, state.params, state.log_s, origins, dirs, rcfg, rng)
    total, d_color, d_op, parts = loss(result.color, target, result.opacity, mask, cfg.schedules.w_mask)
    # the loss normalizes by the chunk size; the caller rescales to the batch
    grad = backprop_rays(state.grid, state.params, result, d_color, rcfg, d_op)
    return result, total, parts, grad


def _merge(grads, weights, n_vertices):
    """Weighted sum of per-chunk gradients, in chunk order."""
    dense = np.zeros(n_vertices)
    tables = None
    layers = None
    d_log_s = 0.0
    for g, w in zip(grads, weights):
        dense[g.grid_ids] += w * g.grid_vals
        if g.radiance is not None:
            t = w * g.radiance.tables
            tables = t if tables is None else tables + t
            scaled = [w * a for a in g.radiance.layers]
            layers = scaled if layers is None else [a + b for a, b in zip(layers, scaled)]
        d_log_s += w * g.d_log_s
    return dense, tables, layers, d_log_s


def train_step(state: TrainState, data: Dataset, cfg: TrainConfig) -> dict:
    """Advance ``state`` by one step in place and return the step's metrics."""
    sched = cfg.schedules
    step = state.step
    w_eik, w_curv, new_res = schedule_tick(sched, step)
    if new_res is not None and new_res != state.grid.resolution[0]:
        state.grid = upsample(state.grid, new_res)
        state.adam_grid = AdamState.zeros(state.grid.n_vertices, state.grid.n_vertices)
        log.info("step %d: grid upsampled to %d^3", step, new_res)
    rng = step_rng(state.seed, step)
    idx = sample_batch(data, cfg, rng)
    jitter_rng = np.random.default_rng(rng.integers(2**63))
    rcfg = RenderConfig(
        n_samples=cfg.n_samples,
        gradient=cfg.gradient,
        normal_to_radiance=cfg.normal_to_radiance,
    )
    vg = vertex_gradients(state.grid) if cfg.gradient == "interpolated" else None
    o, d, target = data.origins[idx], data.dirs[idx], data.colors[idx]
    mask = data.masks.reshape(-1)[idx].astype(np.float64)

    chunks = np.array_split(np.arange(len(idx)), cfg.threads) if cfg.threads > 1 else [np.arange(len(idx))]
    # one jitter seed per chunk keeps results independent of scheduling
    seeds = jitter_rng.integers(2**63, size=len(chunks))

    def work(k):
        c = chunks[k]
        return _render_and_backprop(
            state, vg, o[c], d[c], target[c], mask[c], rcfg, cfg, np.random.default_rng(seeds[k])
        )

    if len(chunks) == 1:
        outs = [work(0)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outs = list(pool.map(work, range(len(chunks))))
    frac = [len(c) / len(idx) for c in chunks]
    dense, g_tables, layer_grads, d_log_s = _merge([x[3] for x in outs], frac, state.grid.n_vertices)
    l_total = sum(f * x[1] for f, x in zip(frac, outs))
    l_rgb = sum(f * x[2]["L_RGB"] for f, x in zip(frac, outs))
    color = np.concatenate([x[0].color for x in outs])

    # regularize the vertices of every cube holding a sample of this batch
    pts = np.concatenate([x[0].cache.points.reshape(-1, 3) for x in outs if x[0].cache is not None])
    batch = regularize(pts, state.grid)
    dense = accumulate(dense, batch.grad_eik, batch.grad_curv, w_eik, w_curv)
    if not np.all(np.isfinite(dense)) or not np.isfinite(l_total):
        raise NumericFailure(f"non-finite gradient or loss at step {step}")

    # optimizer
    b1, b2, eps = sched.beta1, sched.beta2, sched.adam_eps
    scale = lr_scale(sched, step)
    ids = np.flatnonzero(dense)
    flat = state.grid.values.reshape(-1)
    p = flat.astype(np.float64)
    sparse_adam_step(p, ids, dense[ids], state.adam_grid, scale * sched.lr_grid, b1, b2, eps)
    flat[ids] = p[ids]
    if g_tables is not None:
        rows = np.flatnonzero(np.any(g_tables != 0.0, axis=1))
        tables = state.params.tables.reshape(g_tables.shape)
        t64 = tables.astype(np.float64)
        sparse_adam_step(t64, rows, g_tables[rows], state.adam_tables, scale * sched.lr_tables, b1, b2, eps)
        tables[rows] = t64[rows]
        for i, (a, g) in enumerate(zip(state.params.layers, layer_grads)):
            state.params.layers[i] = dense_adam_step(a, g, state.adam_layers[i], scale * sched.lr_decoder, b1, b2, eps).astype(
                a.dtype
            )
    g_s = amplify_s_gradient(d_log_s, sched.k)
    state.log_s = float(dense_adam_step(np.float64(state.log_s), g_s, state.adam_log_s, scale * sched.lr_log_s, b1, b2, eps))
    state.step += 1
    return {
        "step": step,
        "L_RGB": l_rgb,
        "L_eik": batch.loss_eik,
        "L_curv": batch.loss_curv,
        "s": state.s,
        "psnr": psnr(color, target),
    }


# --- loop, checkpoints ------------------------------------------------------------


def save_checkpoint(state: TrainState, cfg: TrainConfig, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(state.grid, out / "grid.sdfg")
    save_params(state.params, out / "radiance.radf")
    arrays = {
        "grid_m": state.adam_grid.m,
        "grid_v": state.adam_grid.v,
        "grid_count": state.adam_grid.count,
        "tables_m": state.adam_tables.m,
        "tables_v": state.adam_tables.v,
        "tables_count": state.adam_tables.count,
        "log_s_state": np.array([state.adam_log_s.m, state.adam_log_s.v, state.adam_log_s.count], dtype=np.float64),
        "scalars": np.array([state.log_s, state.step, state.seed], dtype=np.float64),
    }
    for i, a in enumerate(state.adam_layers):
        arrays[f"layer{i}_m"], arrays[f"layer{i}_v"] = a.m, a.v
        arrays[f"layer{i}_count"] = np.asarray(a.count)
    np.savez(out / "optimizer.npz", **arrays)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))


def load_checkpoint(directory) -> tuple[TrainState, TrainConfig]:
    src = Path(directory)
    cfg = config_from_dict(json.loads((src / "config.json").read_text()))
    grid = load_grid(src / "grid.sdfg")
    params = load_params(src / "radiance.radf")
    z = np.load(src / "optimizer.npz")
    log_s, step, seed = z["scalars"]
    ls = z["log_s_state"]
    layers = [
        AdamState(z[f"layer{i}_m"], z[f"layer{i}_v"], z[f"layer{i}_count"].astype(np.int64))
        for i in range(len(params.layers))
    ]
    state = TrainState(
        grid=grid,
        params=params,
        log_s=float(log_s),
        adam_grid=AdamState(z["grid_m"], z["grid_v"], z["grid_count"].astype(np.int64)),
        adam_tables=AdamState(z["tables_m"], z["tables_v"], z["tables_count"].astype(np.int64)),
        adam_layers=layers,
        adam_log_s=AdamState(np.float64(ls[0]), np.float64(ls[1]), np.array(int(ls[2]))),
        step=int(step),
        seed=int(seed),
    )
    return state, cfg


def train(
    scene: AnalyticScene,
    cfg: TrainConfig,
    state: TrainState | None = None,
    data: Dataset | None = None,
    until: int | None = None,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Run steps ``state.step .. until`` (default: the schedule's total).

    Writes ``metrics.csv`` and a final checkpoint when ``cfg.out`` is set.
    """
    if data is None:
        data = Dataset.render(scene, cfg.n_views, cfg.width, cfg.height)
    if data.roi is None and cfg.roi_margin > 0:
        data.roi = region_of_interest(data, scene.center, cfg.roi_margin * cfg.init_radius * 0.5 * scene.extent)
    if state is None:
        state = init_state(scene, cfg)
    end = cfg.schedules.total_steps if until is None else until
    start = state.step
    rows = []
    while state.step < end:
        m = train_step(state, data, cfg)
        rows.append(m)
        if on_step is not None:
            on_step(m)
        if cfg.log_every and m["step"] % cfg.log_every == 0:
            log.debug("step %(step)d L_RGB %(L_RGB).4f L_eik %(L_eik).4f s %(s).1f", m)
        if cfg.out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, cfg, Path(cfg.out) / f"ckpt_{state.step:06d}")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        table = [[r[c] for c in METRIC_COLUMNS] for r in rows]
        log_path = out / "metrics.csv"
        if start > 0 and log_path.exists():
            # resuming: keep the earlier rows of the log
            old = read_csv(log_path)
            keep = [[int(s)] + [float(old[c][i]) for c in METRIC_COLUMNS[1:]] for i, s in enumerate(old["step"]) if s < start]
            table = keep + table
        write_csv(log_path, METRIC_COLUMNS, table)
        save_checkpoint(state, cfg, out / "final")
    return state, rows
