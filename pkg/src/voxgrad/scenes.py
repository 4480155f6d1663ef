"""Synthetic scenes with exact SDFs, procedural textures and camera rigs.

Ground-truth images come from sphere tracing the analytic SDF and shading
hits with a fixed directional light. They are the only training data the
package uses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxgrad.renderer import intersect_aabb
from voxgrad.sdf_grid import SdfGrid

LIGHT_DIR = np.array([0.4, -0.5, 0.75]) / np.linalg.norm([0.4, -0.5, 0.75])
AMBIENT = 0.35


# --- shapes ---------------------------------------------------------------


@dataclass
class Shape:
    kind: str
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.5  # sphere radius, rounding radius, torus tube radius
    half: np.ndarray = field(default_factory=lambda: np.full(3, 0.4))  # box half-extents
    major: float = 0.5  # torus ring radius
    children: list["Shape"] = field(default_factory=list)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        q = p[..., : self.center.size] - self.center if self.kind != "union" else p
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.radius
        if self.kind in ("box", "rounded_box"):
            r = self.radius if self.kind == "rounded_box" else 0.0
            d = np.abs(q) - (self.half - r)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside - r
        if self.kind == "torus":
            ring = np.linalg.norm(q[..., [0, 2]], axis=-1) - self.major
            return np.sqrt(ring**2 + q[..., 1] ** 2) - self.radius
        if self.kind == "union":
            return np.min([c.sdf(p) for c in self.children], axis=0)
        raise ValueError(f"unknown shape kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        d = dict(d)
        kind = d.pop("kind")
        if kind not in ("sphere", "box", "rounded_box", "torus", "union"):
            raise ValueError(f"unknown shape kind {kind!r}")
        children = [cls.from_dict(c) for c in d.pop("children", [])]
        allowed = {"center", "radius", "half", "major"}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown shape keys {sorted(extra)}")
        kw = {k: (np.asarray(v, dtype=np.float64) if k in ("center", "half") else float(v)) for k, v in d.items()}
        if "half" in kw and kw["half"].size == 1:
            kw["half"] = np.full(3, float(kw["half"]))
        return cls(kind=kind, children=children, **kw)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "union":
            out["children"] = [c.to_dict() for c in self.children]
            return out
        out["center"] = self.center.tolist()
        if self.kind in ("sphere", "rounded_box", "torus"):
            out["radius"] = self.radius
        if self.kind in ("box", "rounded_box"):
            out["half"] = self.half.tolist()
        if self.kind == "torus":
            out["major"] = self.major
        return out


# --- textures -------------------------------------------------------------


@dataclass
class Texture:
    kind: str = "constant"  # constant | checker | stripes
    color_a: tuple = (0.8, 0.5, 0.3)
    color_b: tuple = (0.2, 0.3, 0.7)
    scale: float = 0.25  # checker cell size / stripe period in world units
    face: tuple | None = None  # restrict the pattern to surfaces facing this way

    def color(self, p: np.ndarray, normal: np.ndarray) -> np.ndarray:
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind == "constant":
            return np.broadcast_to(a, p.shape).copy()
        if self.kind == "checker":
            # tiny offset keeps cell boundaries off common plane coordinates
            cells = np.floor((p + 1e-3) / self.scale).astype(np.int64).sum(axis=-1)
            pattern = (cells % 2 == 0)[..., None]
        elif self.kind == "stripes":
            # wavy high-contrast bands, loosely woodgrain-like
            phase = (p[..., 0] + 0.15 * np.sin(7.0 * p[..., 1])) / self.scale
            pattern = (np.floor(phase).astype(np.int64) % 2 == 0)[..., None]
        else:
            raise ValueError(f"unknown texture kind {self.kind!r}")
        out = np.where(pattern, a, b)
        if self.face is not None:
            facing = (normal @ np.asarray(self.face, dtype=np.float64)) > 0.9
            out = np.where(facing[..., None], out, a)
        return out


@dataclass
class AnalyticScene:
    shape: Shape
    texture: Texture = field(default_factory=Texture)
    background: tuple = (0.0, 0.0, 0.0)
    lo: np.ndarray = field(default_factory=lambda: -np.ones(3))
    hi: np.ndarray = field(default_factory=lambda: np.ones(3))
    glossy: bool = False
    name: str = "scene"

    @property
    def extent(self) -> float:
        return float(np.max(self.hi - self.lo))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def to_dict(self) -> dict:
        t = self.texture
        return {
            "name": self.name,
            "shape": self.shape.to_dict(),
            "texture": {
                "kind": t.kind,
                "color_a": list(t.color_a),
                "color_b": list(t.color_b),
                "scale": t.scale,
                "face": None if t.face is None else list(t.face),
            },
            "background": list(self.background),
            "bounds": [self.lo.tolist(), self.hi.tolist()],
            "glossy": self.glossy,
        }


_SCENE_KEYS = {"name", "shape", "texture", "background", "bounds", "glossy"}
_TEXTURE_KEYS = {"kind", "color_a", "color_b", "scale", "face"}


def scene_from_dict(d: dict) -> AnalyticScene:
    extra = set(d) - _SCENE_KEYS
    if extra:
        raise ValueError(f"unknown scene keys {sorted(extra)}")
    if "shape" not in d:
        raise ValueError("scene needs a 'shape'")
    tex = dict(d.get("texture", {}))
    if set(tex) - _TEXTURE_KEYS:
        raise ValueError(f"unknown texture keys {sorted(set(tex) - _TEXTURE_KEYS)}")
    if "face" in tex and tex["face"] is not None:
        tex["face"] = tuple(tex["face"])
    texture = Texture(**tex)
    texture.color(np.zeros((1, 3)), np.zeros((1, 3)))  # validates kind
    lo, hi = d.get("bounds", [[-1, -1, -1], [1, 1, 1]])
    scene = AnalyticScene(
        shape=Shape.from_dict(d["shape"]),
        texture=texture,
        background=tuple(float(c) for c in d.get("background", (0.0, 0.0, 0.0))),
        lo=np.asarray(lo, dtype=np.float64),
        hi=np.asarray(hi, dtype=np.float64),
        glossy=bool(d.get("glossy", False)),
        name=str(d.get("name", "scene")),
    )
    if np.any(scene.hi <= scene.lo):
        raise ValueError("scene bounds must satisfy lo < hi")
    return scene


def load_scene(path) -> AnalyticScene:
    return scene_from_dict(json.loads(Path(path).read_text()))


def builtin_scene(name: str) -> AnalyticScene:
    """Bundled scenes: sphere, textured_box, textured_plane, torus."""
    if name == "sphere":
        return AnalyticScene(
            Shape("sphere", radius=0.5),
            Texture("checker", (0.9, 0.6, 0.3), (0.3, 0.5, 0.9), scale=0.25),
            name=name,
        )
    if name == "textured_box":
        return AnalyticScene(
            Shape("rounded_box", half=np.array([0.45, 0.45, 0.45]), radius=0.1),
            Texture("checker", (0.95, 0.9, 0.8), (0.25, 0.2, 0.55), scale=0.3),
            name=name,
        )
    if name == "textured_plane":
        # slab with woodgrain-like stripes on its top (+z) face only
        return AnalyticScene(
            Shape("box", half=np.array([0.55, 0.55, 0.25])),
            Texture("stripes", (0.85, 0.65, 0.4), (0.25, 0.12, 0.05), scale=0.12, face=(0.0, 0.0, 1.0)),
            name=name,
        )
    if name == "torus":
        return AnalyticScene(
            Shape("torus", radius=0.2, major=0.5),
            Texture("checker", (0.8, 0.8, 0.3), (0.2, 0.6, 0.4), scale=0.2),
            name=name,
        )
    raise ValueError(f"unknown builtin scene {name!r}")


BUILTIN_SCENES = ("sphere", "textured_box", "textured_plane", "torus")


def resolve_scene(name: str) -> AnalyticScene:
    """A bundled scene by name, otherwise a scene JSON file."""
    if name in BUILTIN_SCENES:
        return builtin_scene(name)
    if not Path(name).suffix:
        raise ValueError(f"unknown scene {name!r}; bundled scenes are {', '.join(BUILTIN_SCENES)}")
    return load_scene(name)


def sdf_query(scene: AnalyticScene, x) -> np.ndarray:
    return scene.shape.sdf(np.asarray(x, dtype=np.float64))


def sdf_normal(scene: AnalyticScene, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.stack(
        [sdf_query(scene, x + h * e) - sdf_query(scene, x - h * e) for e in np.eye(3)],
        axis=-1,
    )
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def bake_grid(scene: AnalyticScene, resolution, dtype=np.float32) -> SdfGrid:
    """Exact SDF sampled on a lattice spanning the scene box."""
    return SdfGrid.from_function(lambda p: sdf_query(scene, p), resolution, scene.lo, scene.hi, dtype=dtype)


# --- cameras --------------------------------------------------------------


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float  # degrees
    width: int
    height: int

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd

    @property
    def focal(self) -> float:
        """Focal length in pixels."""
        return 0.5 * self.height / np.tan(np.radians(self.fov_y) / 2)

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel origins and unit directions, each (H, W, 3)."""
        right, up, fwd = self.basis()
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        x = (j - 0.5 * self.width) / self.focal
        y = (0.5 * self.height - i) / self.focal
        d = fwd + x[..., None] * right + y[..., None] * up
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return np.broadcast_to(self.position, d.shape).copy(), d

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points -> continuous pixel coordinates (col, row)."""
        right, up, fwd = self.basis()
        q = np.asarray(points, dtype=np.float64) - self.position
        z = q @ fwd
        col = 0.5 * self.width + self.focal * (q @ right) / z
        row = 0.5 * self.height - self.focal * (q @ up) / z
        return np.stack([col, row], axis=-1)

    def to_dict(self) -> dict:
        right, up, fwd = self.basis()
        rot = np.stack([right, -up, fwd])  # world -> camera, y down
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ self.position
        return {
            "position": self.position.tolist(),
            "look_at": self.look_at.tolist(),
            "up": self.up.tolist(),
            "fov_y": self.fov_y,
            "width": self.width,
            "height": self.height,
            "intrinsics": {"fx": self.focal, "fy": self.focal, "cx": self.width / 2, "cy": self.height / 2},
            "world_to_camera": w2c.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            np.asarray(d["position"], dtype=np.float64),
            np.asarray(d["look_at"], dtype=np.float64),
            np.asarray(d["up"], dtype=np.float64),
            float(d["fov_y"]),
            int(d["width"]),
            int(d["height"]),
        )


def box_corners(lo, hi) -> np.ndarray:
    return np.array([[(hi if b else lo)[k] for k, b in enumerate(bits)] for bits in np.ndindex(2, 2, 2)], dtype=np.float64)


def make_rig(scene: AnalyticScene, n_views: int, width: int, height: int) -> list[Camera]:
    """Fibonacci-sphere cameras at 2.5x the box half-extent, all aimed at the
    box center, sharing one field of view wide enough for every box corner."""
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    radius = 2.5 * 0.5 * scene.extent
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n_views)
    z = 1.0 - 2.0 * (k + 0.5) / n_views
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(golden * k), r * np.sin(golden * k), z], axis=-1)
    center = scene.center
    corners = box_corners(scene.lo, scene.hi)
    cams = []
    for d in dirs:
        up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.95 else np.array([0.0, 1.0, 0.0])
        cams.append(Camera(center + radius * d, center.copy(), up, 60.0, width, height))
    # widest tangent any corner needs, horizontally or vertically
    need = 0.0
    for cam in cams:
        right, up, fwd = cam.basis()
        q = corners - cam.position
        z_c = q @ fwd
        need = max(need, np.max(np.abs(q @ up) / z_c), np.max(np.abs(q @ right) / z_c) * height / width)
    fov = 2.0 * np.degrees(np.arctan(need * 1.05))
    for cam in cams:
        cam.fov_y = fov
    return cams


# --- ground-truth rendering ----------------------------------------------


def sphere_trace(scene: AnalyticScene, origins, dirs, max_steps: int = 256):
    """March rays against the analytic SDF. Returns ``(t, hit)``."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    eps = 1e-4 * scene.extent
    near, far, inside = intersect_aabb(origins, dirs, scene.lo, scene.hi)
    t = near.copy()
    hit = np.zeros(len(t), dtype=bool)
    active = inside.copy()
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d = sdf_query(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d < eps
        hit[idx[done]] = True
        t[idx[~done]] += d[~done]
        escaped = t[idx] > far[idx]
        active[idx[done | escaped]] = False
    return t, hit


def shade_surface(scene: AnalyticScene, points, normals, view_dirs) -> np.ndarray:
    albedo = scene.texture.color(points, normals)
    diffuse = np.clip(normals @ LIGHT_DIR, 0.0, None)[..., None]
    color = albedo * (AMBIENT + (1.0 - AMBIENT) * diffuse)
    if scene.glossy:
        refl = LIGHT_DIR - 2.0 * (normals @ LIGHT_DIR)[..., None] * normals
        highlight = np.clip(np.sum(refl * view_dirs, axis=-1), 0.0, None) ** 32
        color = color + 0.4 * highlight[..., None]
    return np.clip(color, 0.0, 1.0)


def render_ground_truth(scene: AnalyticScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Image (H, W, 3) in [0, 1] and boolean hit mask (H, W)."""
    origins, dirs = camera.rays()
    o, d = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    t, hit = sphere_trace(scene, o, d)
    img = np.tile(np.asarray(scene.background, dtype=np.float64), (len(t), 1))
    if hit.any():
        p = o[hit] + t[hit, None] * d[hit]
        n = sdf_normal(scene, p)
        img[hit] = shade_surface(scene, p, n, d[hit])
    return img.reshape(camera.height, camera.width, 3), hit.reshape(camera.height, camera.width)
