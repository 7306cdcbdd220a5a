"""On-disk formats: CSV point clouds, PGM previews, raw float64 images,
observation bundles, and a dependency-free raster scatter plot."""

from __future__ import annotations

import csv
import json
import os

import numpy as np


def write_csv(path, rows, header=None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if header is not None:
            w.writerow(header)
        for r in rows:
            w.writerow(list(r))


def read_csv(path, skip_header=False):
    with open(path, newline="") as f:
        r = csv.reader(f)
        rows = list(r)
    if skip_header and rows:
        rows = rows[1:]
    return np.array([[float(v) for v in row] for row in rows])


def write_points(path, X):
    """Point cloud, one point per row, no header."""
    write_csv(path, np.asarray(X))


def read_points(path):
    return read_csv(path)


def write_pgm(path, img):
    """8-bit binary PGM preview; values clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    b = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(b.tobytes())


def write_raw(path, arr):
    """Raw little-endian float64, shape in a sidecar .shape file."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(arr.tobytes())
    with open(path + ".shape", "w") as f:
        f.write(" ".join(str(s) for s in arr.shape))


def read_raw(path):
    with open(path + ".shape") as f:
        shape = tuple(int(s) for s in f.read().split())
    return np.fromfile(path, dtype="<f8").reshape(shape)


def write_bundle(dirpath, observation, operator_config: dict,
                 ground_truth=None):
    """Observation bundle: directory with observation, operator config, and
    optionally the ground truth."""
    os.makedirs(dirpath, exist_ok=True)
    write_raw(os.path.join(dirpath, "observation.raw"), observation)
    with open(os.path.join(dirpath, "operator.json"), "w") as f:
        json.dump(operator_config, f, indent=1, sort_keys=True)
    if ground_truth is not None:
        write_raw(os.path.join(dirpath, "ground_truth.raw"), ground_truth)


def read_bundle(dirpath):
    obs = read_raw(os.path.join(dirpath, "observation.raw"))
    with open(os.path.join(dirpath, "operator.json")) as f:
        op = json.load(f)
    gt_path = os.path.join(dirpath, "ground_truth.raw")
    gt = read_raw(gt_path) if os.path.exists(gt_path) else None
    return obs, op, gt


# fixed palette for chart-colored scatters (RGB in [0,1])
_PALETTE = np.array([
    [0.85, 0.25, 0.25], [0.25, 0.45, 0.85], [0.25, 0.70, 0.30],
    [0.85, 0.60, 0.15], [0.60, 0.30, 0.70], [0.20, 0.65, 0.65],
    [0.75, 0.35, 0.55], [0.50, 0.50, 0.20]])


def scatter_image(X, labels=None, size=400, margin=0.05):
    """Rasterize 2D/3D points into an RGB array (3D: drop the last axis)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("need (N, >=2) points")
    P = X[:, :2]
    img = np.ones((size, size, 3))
    if P.shape[0] == 0:
        return img
    lo = P.min(axis=0)
    hi = P.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    pix = (P - lo) / span * (size * (1 - 2 * margin)) + size * margin
    cols = np.clip(pix[:, 0].astype(int), 0, size - 1)
    rows = np.clip((size - 1 - pix[:, 1]).astype(int), 0, size - 1)
    if labels is None:
        colors = np.tile(_PALETTE[1], (P.shape[0], 1))
    else:
        colors = _PALETTE[np.asarray(labels, dtype=int) % len(_PALETTE)]
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r = np.clip(rows + dr, 0, size - 1)
            c = np.clip(cols + dc, 0, size - 1)
            img[r, c] = colors
    return img


def write_ppm(path, rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    b = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode())
        f.write(b.tobytes())
