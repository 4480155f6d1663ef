"""Readers and writers for the on-disk formats: PPM, PFM, ASCII PLY, CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit. ``image`` is float in [0, 1], (H, W, 3) or (H, W)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: only binary P6 is supported")
    w, h, maxval = (int(x) for x in fields[1:])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian color PFM; rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    h, w, _ = img.shape
    header = f"PF\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 3)
    if lines[0] != b"PF":
        raise ValueError(f"{path}: not a color PFM")
    w, h = (int(x) for x in lines[1].split())
    dtype = "<f4" if float(lines[2]) < 0 else ">f4"
    data = np.frombuffer(lines[3], dtype=dtype, count=w * h * 3)
    return data.reshape(h, w, 3)[::-1].astype(np.float64)


def write_ply(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    i = 1
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        i += 1
    body = text[i + 1 :]
    verts = np.array([[float(v) for v in line.split()[:3]] for line in body[:n_vert]]).reshape(-1, 3)
    faces = np.array([[int(v) for v in line.split()[1:4]] for line in body[n_vert : n_vert + n_face]], dtype=np.int64)
    return verts, faces.reshape(-1, 3)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [[] for _ in header]
    return {name: np.array([float(v) for v in col]) for name, col in zip(header, cols)}
