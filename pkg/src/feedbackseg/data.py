"""Synthetic building-footprint imagery, augmentation, file I/O and tiling.

Patches are single-channel 64 x 64 images: a smooth low-frequency background
with zero to four bright rectangles ("buildings"), optionally rotated, plus
pixel noise. Training sets carry only an image-level label; footprint masks
are written to a separate directory that the training loader never opens.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import DTYPE

log = logging.getLogger(__name__)


@dataclass
class GenParams:
    patch_size: int = 64
    building_count_range: tuple = (0, 4)
    building_size_range: tuple = (4, 12)
    contrast: float = 0.3
    background_range: tuple = (0.2, 0.6)
    background_cell: int = 16
    pixel_noise_sigma: float = 0.05
    positive_fraction: float = 0.5
    rotation_step_deg: float = 15.0
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        self.building_count_range = tuple(int(v) for v in self.building_count_range)
        self.building_size_range = tuple(int(v) for v in self.building_size_range)
        self.background_range = tuple(float(v) for v in self.background_range)

    def validate(self):
        lo, hi = self.building_count_range
        if not 0 <= lo <= hi or hi < 1:
            raise ValueError(f"bad building_count_range {self.building_count_range}")
        smin, smax = self.building_size_range
        if not 1 <= smin <= smax or smax > self.patch_size:
            raise ValueError(f"bad building_size_range {self.building_size_range}")
        blo, bhi = self.background_range
        if not 0 <= blo <= bhi <= 1:
            raise ValueError(f"bad background_range {self.background_range}")
        if not 0 < self.positive_fraction < 1:
            raise ValueError(f"positive_fraction must be in (0, 1), got {self.positive_fraction}")
        if self.pixel_noise_sigma < 0 or self.patch_size < 1 or self.background_cell < 1:
            raise ValueError("noise, patch_size and background_cell must be non-negative/positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background + building)")


@dataclass
class LabeledPatch:
    image: np.ndarray  # 1 x H x W in [0, 1]
    label: np.ndarray  # binary, length num_classes
    name: str = ""


@dataclass
class EvalTile:
    image: np.ndarray  # 1 x H x W
    mask: np.ndarray  # H x W, {0, 1}
    provenance: dict = field(default_factory=dict)
    name: str = ""


def derive_rng(seed, *tags):
    """Independent stream for ``(seed, tags...)``; tags may be ints or strings."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.extend(t.encode("utf-8"))
        else:
            words.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def label_vector(positive, num_classes=2):
    out = np.zeros(num_classes, dtype=DTYPE)
    out[1 if positive else 0] = 1
    return out


# -- rendering --------------------------------------------------------------


def _value_noise(rng, h, w, lo, hi, cell):
    """Bilinearly interpolated uniform grid values; stays within [lo, hi]."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.uniform(lo, hi, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def _rect_mask(h, w, cy, cx, height, width, angle):
    """Pixels whose centres fall inside a rectangle rotated by ``angle`` radians."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) < width / 2) & (np.abs(v) < height / 2)


def _draw_buildings(rng, h, w, count, params, origin=(0, 0), region=None):
    """Union mask of ``count`` rectangles placed fully inside ``region``."""
    rh, rw = region if region is not None else (h, w)
    oy, ox = origin
    mask = np.zeros((h, w), dtype=bool)
    smin, smax = params.building_size_range
    steps = int(round(180 / params.rotation_step_deg)) if params.rotation_step_deg > 0 else 1
    for _ in range(count):
        bh, bw = rng.integers(smin, smax + 1, size=2)
        angle = np.deg2rad(params.rotation_step_deg * rng.integers(0, steps))
        # half-extent of the rotated box, so the building stays in the region
        ey = 0.5 * (abs(np.cos(angle)) * bh + abs(np.sin(angle)) * bw)
        ex = 0.5 * (abs(np.sin(angle)) * bh + abs(np.cos(angle)) * bw)
        cy = oy + rng.uniform(min(ey, rh / 2), max(rh - ey, rh / 2))
        cx = ox + rng.uniform(min(ex, rw / 2), max(rw - ex, rw / 2))
        m = _rect_mask(h, w, cy, cx, bh, bw, angle)
        if not m.any():  # degenerate thin rotation: fall back to the centre pixel
            m[int(cy), int(cx)] = True
        mask |= m
    return mask


def _finish(rng, background, mask, params):
    img = background + params.contrast * mask
    if params.pixel_noise_sigma > 0:
        img = img + rng.normal(0, params.pixel_noise_sigma, size=img.shape)
    return np.clip(img, 0, 1).astype(DTYPE)


def generate_patch(rng, params, building_count=None):
    """Return ``(image, mask, label)`` for one patch.

    ``image`` is 1 x S x S float32 in [0, 1], ``mask`` is S x S uint8, and
    ``label`` is the binary class vector (index 1 = building present).
    """
    s = params.patch_size
    bg = _value_noise(rng, s, s, *params.background_range, params.background_cell)
    if building_count is None:
        lo, hi = params.building_count_range
        if rng.random() < params.positive_fraction:
            building_count = int(rng.integers(max(lo, 1), hi + 1))
        else:
            building_count = 0
    mask = _draw_buildings(rng, s, s, building_count, params)
    img = _finish(rng, bg, mask, params)
    return img[None], mask.astype(np.uint8), label_vector(mask.any(), params.num_classes)


def generate_tile(rng, params, size=256):
    """Evaluation tile built cell by cell with the patch statistics.

    Each ``patch_size`` cell is independently positive with probability
    ``positive_fraction``; the background is one smooth field over the tile.
    """
    s = params.patch_size
    if size % s:
        raise ValueError(f"tile size {size} must be a multiple of {s}")
    bg = _value_noise(rng, size, size, *params.background_range, params.background_cell)
    mask = np.zeros((size, size), dtype=bool)
    lo, hi = params.building_count_range
    for r in range(0, size, s):
        for c in range(0, size, s):
            if rng.random() < params.positive_fraction:
                k = int(rng.integers(max(lo, 1), hi + 1))
                mask |= _draw_buildings(rng, size, size, k, params, origin=(r, c), region=(s, s))
    img = _finish(rng, bg, mask, params)
    return img[None], mask.astype(np.uint8)


def generate_tiles(params, n, size=256, seed=None):
    seed = params.seed if seed is None else seed
    tiles = []
    for i in range(n):
        img, mask = generate_tile(derive_rng(seed, "tile", i), params, size)
        prov = {"seed": seed, "index": i, "size": size}
        tiles.append(EvalTile(img, mask, prov, name=f"tile_{i:04d}"))
    return tiles


# -- augmentation -----------------------------------------------------------


def dihedral(image, index):
    """Transform ``index`` in 0..7: rotate by ``index % 4`` quarter turns, flip if ``index >= 4``."""
    out = np.rot90(image, index % 4, axes=(-2, -1))
    if index >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_8fold(patch):
    """The eight dihedral images of a square patch, with the label unchanged."""
    img = patch.image
    if img.shape[-1] != img.shape[-2]:
        raise ValueError(f"8-fold augmentation needs a square image, got {img.shape}")
    return [
        LabeledPatch(dihedral(img, k), patch.label.copy(), f"{patch.name}#{k}") for k in range(8)
    ]


# -- tiling -----------------------------------------------------------------


def _starts(length, patch, stride):
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def tile_image(tile, patch_size, stride):
    """Overlapping ``patch_size`` windows covering ``tile`` (... x H x W).

    Returns ``(patches, coords)`` with ``coords`` the (row, col) of each
    window's top-left corner. The last window in each direction is clamped
    to the border so the whole tile is covered.
    """
    h, w = tile.shape[-2:]
    if stride < 1 or stride > patch_size:
        raise ValueError(f"stride must be in 1..{patch_size}, got {stride}")
    if h < patch_size or w < patch_size:
        raise ValueError(f"tile {h}x{w} is smaller than the patch size {patch_size}")
    coords = [(r, c) for r in _starts(h, patch_size, stride) for c in _starts(w, patch_size, stride)]
    patches = [tile[..., r : r + patch_size, c : c + patch_size] for r, c in coords]
    return patches, coords


def stitch_maps(maps, coords, tile_shape):
    """Average overlapping per-patch maps back into a ``tile_shape`` map."""
    acc = np.zeros(tile_shape, dtype=np.float64)
    count = np.zeros(tile_shape, dtype=np.int64)
    for m, (r, c) in zip(maps, coords):
        ph, pw = m.shape[-2:]
        if r + ph > tile_shape[0] or c + pw > tile_shape[1]:
            raise ValueError(f"patch at {(r, c)} of size {(ph, pw)} exceeds tile {tile_shape}")
        acc[r : r + ph, c : c + pw] += m
        count[r : r + ph, c : c + pw] += 1
    if (count == 0).any():
        raise ValueError("patches do not cover the whole tile")
    return (acc / count).astype(np.result_type(*maps))


# -- file I/O ---------------------------------------------------------------


class ImageFormatError(ValueError):
    pass


def _read_token(data, pos):
    while True:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PGM header")
    return data[start:pos], pos


def read_pgm(path):
    """Raw integer pixels and maxval of a binary (P5) PGM file."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise ImageFormatError(f"{path}: only binary PGM (P5) is supported")
    pos = 2
    vals = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            vals.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"{path}: bad header field {tok!r}") from None
    w, h, maxval = vals
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad header {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    raster = data[pos : pos + nbytes]
    if len(raster) != nbytes:
        raise ImageFormatError(f"{path}: expected {nbytes} raster bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w), maxval


def write_pgm(path, pixels, maxval):
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        f.write(pixels.astype(dtype).tobytes())


def load_image(path):
    """Load a PGM as a 1 x H x W float32 tensor scaled to [0, 1]."""
    px, maxval = read_pgm(path)
    return (px.astype(np.float64) / maxval).astype(DTYPE)[None]


def save_map(seg_map, path):
    """Write a map in [0, 1] as a 16-bit PGM (values are clipped)."""
    m = np.asarray(seg_map, dtype=np.float64)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    px = np.rint(np.clip(m, 0, 1) * 65535).astype(np.uint16)
    write_pgm(path, px, 65535)


def save_mask(mask, path):
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, 255)


def load_mask(path):
    px, _ = read_pgm(path)
    return (px > 0).astype(np.uint8)


# -- datasets ---------------------------------------------------------------


def _params_lines(params):
    out = []
    for k, v in asdict(params).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        out.append(f"gen.{k} = {v}")
    return out


def generate_dataset(params, n, out_dir):
    """Write ``n`` labeled patches under ``out_dir``; returns the manifest dict.

    Layout: ``images/patch_NNNNNN.pgm``, ``masks/patch_NNNNNN.pgm``,
    ``labels.csv`` (``filename,label``) and ``manifest.txt``.
    """
    params.validate()
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    positives = 0
    for i in range(n):
        img, mask, label = generate_patch(derive_rng(params.seed, "patch", i), params)
        fname = f"patch_{i:06d}.pgm"
        save_map(img[0], os.path.join(img_dir, fname))
        save_mask(mask, os.path.join(mask_dir, fname))
        pos = int(label[1])
        positives += pos
        rows.append((fname, pos))
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    status = "ok" if n > 0 else "warning: empty dataset"
    if n == 0:
        log.warning("generated an empty dataset in %s", out_dir)
    manifest = {
        "format": "feedbackseg-dataset/1",
        "count": n,
        "positives": positives,
        "negatives": n - positives,
        "seed": params.seed,
        "status": status,
    }
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for k, v in manifest.items():
            f.write(f"{k} = {v}\n")
        for line in _params_lines(params):
            f.write(line + "\n")
    return manifest


class DatasetError(ValueError):
    pass


def load_labeled_patches(data_dir, num_classes=2):
    """Read ``images/`` and ``labels.csv``. Masks are never opened here."""
    path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(path):
        raise DatasetError(f"{path}: labels file not found")
    patches = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise DatasetError(f"{path}:1: expected header 'filename,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or row[1].strip() not in ("0", "1"):
                raise DatasetError(f"{path}:{lineno}: cannot parse row {row!r}")
            fname = row[0].strip()
            img_path = os.path.join(data_dir, "images", fname)
            try:
                img = load_image(img_path)
            except (FileNotFoundError, ImageFormatError) as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            patches.append(LabeledPatch(img, label_vector(row[1].strip() == "1", num_classes), fname))
    return patches


def write_tiles(tiles, out_dir):
    """Write evaluation tiles as ``images/`` + ``masks/`` PGMs."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for t in tiles:
        save_map(t.image[0], os.path.join(out_dir, "images", f"{t.name}.pgm"))
        save_mask(t.mask, os.path.join(out_dir, "masks", f"{t.name}.pgm"))
