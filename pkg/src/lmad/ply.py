"""ASCII PLY export of per-point probabilities as a red/blue heatmap.

Color rule: ``red = round(255 * p)``, ``green = 0``, ``blue = 255 - red`` —
cold blue at p=0 through purple to hot red at p=1.  The module also ships a
strict reader for the same subset of PLY, used to verify that exported
files are well-formed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

_PROPERTIES = ("x", "y", "z", "red", "green", "blue")


def heat_colors(probs: np.ndarray) -> np.ndarray:
    """(N, 3) uint8 colors for probabilities in [0, 1]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"probs must be 1-d, got shape {probs.shape}")
    if probs.min(initial=0.0) < 0.0 or probs.max(initial=0.0) > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    red = np.rint(255.0 * probs).astype(np.int64)
    colors = np.zeros((probs.shape[0], 3), dtype=np.uint8)
    colors[:, 0] = red
    colors[:, 2] = 255 - red
    return colors


def write_ply(path, coords: np.ndarray, probs: np.ndarray) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (N, 3), got {coords.shape}")
    if probs.shape != (coords.shape[0],):
        raise ValueError(f"probs shape {np.shape(probs)} does not match {coords.shape[0]} points")
    colors = heat_colors(probs)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {coords.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(coords, colors):
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse the subset of ASCII PLY written above; returns (coords, colors)."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError("not a PLY file: missing 'ply' on line 1")
    if len(lines) < 2 or lines[1] != "format ascii 1.0":
        raise FormatError("line 2 must be 'format ascii 1.0'")
    n_vertices = None
    properties = []
    body_at = None
    for i, line in enumerate(lines[2:], start=3):
        if line == "end_header":
            body_at = i
            break
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vertices = int(parts[2])
        elif parts[:1] == ["property"]:
            properties.append(parts[2])
        elif parts[:1] == ["element"]:
            raise FormatError(f"unsupported element {parts[1]!r} on line {i}")
        elif parts[:1] == ["comment"]:
            continue
        else:
            raise FormatError(f"unexpected header line {i}: {line!r}")
    if body_at is None:
        raise FormatError("missing end_header")
    if n_vertices is None:
        raise FormatError("missing 'element vertex' declaration")
    if tuple(properties) != _PROPERTIES:
        raise FormatError(f"expected properties {_PROPERTIES}, got {tuple(properties)}")
    body = lines[body_at:]
    if len(body) != n_vertices:
        raise FormatError(f"declared {n_vertices} vertices but found {len(body)} rows")
    coords = np.empty((n_vertices, 3), dtype=np.float64)
    colors = np.empty((n_vertices, 3), dtype=np.uint8)
    for j, row in enumerate(body):
        parts = row.split()
        if len(parts) != 6:
            raise FormatError(f"vertex row {j} has {len(parts)} fields, expected 6")
        coords[j] = [float(v) for v in parts[:3]]
        rgb = [int(v) for v in parts[3:]]
        if any(not 0 <= v <= 255 for v in rgb):
            raise FormatError(f"vertex row {j} has color outside [0, 255]")
        colors[j] = rgb
    return coords, colors
