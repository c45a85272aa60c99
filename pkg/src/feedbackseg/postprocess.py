"""Turning probability maps into discrete footprints.

Sobel gradient magnitude is exposed for downstream morphology; footprints
are 8-connected components of a thresholded map.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


@dataclass
class Footprint:
    id: int
    pixels: int
    row_min: int
    col_min: int
    row_max: int
    col_max: int
    centroid_row: float
    centroid_col: float


def sobel_magnitude(image):
    """Gradient magnitude with 3x3 Sobel kernels and replicate border padding."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    p = np.pad(img, 1, mode="edge")
    # Separable form: difference first, then [1, 2, 1] smoothing, so that
    # flat regions cancel exactly.
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    return np.hypot(gx, gy).astype(np.float32)


def extract_footprints(seg_map, threshold=0.5):
    """8-connected components of ``seg_map >= threshold``, largest first."""
    binary = np.asarray(seg_map) >= threshold
    labels, count = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    out = []
    for lab in range(1, count + 1):
        rows, cols = np.nonzero(labels == lab)
        out.append(
            Footprint(
                0,
                int(rows.size),
                int(rows.min()),
                int(cols.min()),
                int(rows.max()),
                int(cols.max()),
                float(rows.mean()),
                float(cols.mean()),
            )
        )
    out.sort(key=lambda f: (-f.pixels, f.row_min, f.col_min))
    for i, f in enumerate(out):
        f.id = i
    return out


FOOTPRINT_FIELDS = [
    "id", "pixels", "row_min", "col_min", "row_max", "col_max", "centroid_row", "centroid_col",
]


def write_footprints(footprints, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FOOTPRINT_FIELDS)
        for fp in footprints:
            writer.writerow([getattr(fp, k) for k in FOOTPRINT_FIELDS])


def read_footprints(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            Footprint(
                *(int(row[k]) for k in FOOTPRINT_FIELDS[:6]),
                float(row["centroid_row"]),
                float(row["centroid_col"]),
            )
            for row in reader
        ]
