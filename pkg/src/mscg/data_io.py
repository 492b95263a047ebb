"""Dataset layout, synthetic scenes and patch sampling.

On disk every sample is a directory holding MTEN tensors:

* ``image.mten``    4 x h x w, f32 in [0, 1] (or u8 scaled by 1/255), NIR, R, G, B
* ``labels.mten``   C x h x w u8 multi-hot; alternatively ``labels/<slug>.mten``
  per class, where a missing file is an all-zero channel
* ``boundary.mten`` 1 x h x w u8, farmland region
* ``mask.mten``     1 x h x w u8, valid pixels

A manifest is a text file with one sample directory per line (relative paths
resolve against the data root, ``#`` starts a comment).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .metrics import CLASS_NAMES
from .numerics import RngState, mten

CELL = 16
CLASS_SLUGS = tuple(n.lower().replace(" ", "_") for n in CLASS_NAMES)
PALETTE = np.array([
    [0.35, 0.55, 0.25],   # background
    [0.18, 0.18, 0.22],   # cloud shadow
    [0.55, 0.75, 0.20],   # double plant
    [0.62, 0.45, 0.30],   # planter skip
    [0.12, 0.28, 0.62],   # standing water
    [0.35, 0.55, 0.70],   # waterway
    [0.75, 0.78, 0.30],   # weed cluster
])


class DataError(Exception):
    """Unreadable or inconsistent dataset files; the message names the path."""


@dataclass
class SegmentationBatch:
    images: np.ndarray   # b x 4 x h x w
    labels: np.ndarray   # b x C x h x w, uint8 multi-hot
    valid: np.ndarray    # b x 1 x h x w, uint8

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def concat(cls, batches) -> "SegmentationBatch":
        batches = list(batches)
        return cls(np.concatenate([b.images for b in batches]),
                   np.concatenate([b.labels for b in batches]),
                   np.concatenate([b.valid for b in batches]))


@dataclass
class DatasetManifest:
    root: Path
    samples: list[Path]
    class_names: tuple[str, ...] = CLASS_NAMES

    def __len__(self):
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def read_manifest(path, data_root=None) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from None
    root = Path(data_root) if data_root is not None else path.parent
    samples = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            samples.append(p if p.is_absolute() else root / p)
    return DatasetManifest(root, samples)


def write_manifest(path, samples, root=None) -> None:
    root = Path(root) if root is not None else Path(path).parent
    rows = ["# one sample directory per line"]
    for s in samples:
        s = Path(s)
        rows.append(str(s.relative_to(root)) if s.is_relative_to(root) else str(s))
    Path(path).write_text("\n".join(rows) + "\n")


def _read(path: Path) -> np.ndarray:
    try:
        return mten.load(path)
    except (OSError, mten.MtenError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _as_mask(arr: np.ndarray, path: Path, hw) -> np.ndarray:
    arr = arr.reshape((-1,) + arr.shape[-2:])
    if arr.shape[-2:] != hw:
        raise DataError(f"{path}: size {arr.shape[-2:]} does not match image {hw}")
    return (arr[:1] > 0).astype(np.uint8)


def with_background(labels: np.ndarray) -> np.ndarray:
    """Background (channel 0) is set exactly where no other annotation is."""
    labels = (labels > 0).astype(np.uint8)
    labels[..., 0, :, :] = (labels[..., 1:, :, :].max(axis=-3) == 0)
    return labels


def load_sample(manifest: DatasetManifest, index: int) -> SegmentationBatch:
    d = Path(manifest.samples[index])
    img_path = d / "image.mten"
    img = _read(img_path)
    if img.ndim != 3 or img.shape[0] != 4:
        raise DataError(f"{img_path}: expected 4 x h x w, got {img.shape}")
    img = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    if img.min() < 0 or img.max() > 1:
        raise DataError(f"{img_path}: values outside [0, 1]")
    hw = img.shape[1:]
    c = manifest.num_classes
    lab_path = d / "labels.mten"
    if lab_path.exists():
        labels = _read(lab_path)
        if labels.shape != (c,) + hw:
            raise DataError(f"{lab_path}: expected {(c,) + hw}, got {labels.shape}")
    else:
        labels = np.zeros((c,) + hw, dtype=np.uint8)
        for j, slug in enumerate(CLASS_SLUGS[:c]):
            p = d / "labels" / f"{slug}.mten"
            if p.exists():
                labels[j] = _as_mask(_read(p), p, hw)[0]
    labels = with_background(labels)
    valid = np.ones((1,) + hw, dtype=np.uint8)
    for name in ("boundary.mten", "mask.mten"):
        p = d / name
        if p.exists():
            valid &= _as_mask(_read(p), p, hw)
    return SegmentationBatch(img[None], labels[None], valid[None])


def load_all(manifest: DatasetManifest) -> SegmentationBatch:
    if len(manifest) == 0:
        raise DataError(f"{manifest.root}: manifest lists no samples")
    return SegmentationBatch.concat(load_sample(manifest, i) for i in range(len(manifest)))


def save_sample(directory, image, labels, boundary=None, mask=None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    mten.save(d / "image.mten", np.asarray(image, dtype=np.float32))
    mten.save(d / "labels.mten", np.asarray(labels, dtype=np.uint8))
    if boundary is not None:
        mten.save(d / "boundary.mten", np.asarray(boundary, dtype=np.uint8))
    if mask is not None:
        mten.save(d / "mask.mten", np.asarray(mask, dtype=np.uint8))
    return d


# ----------------------------------------------------------------- synthetic

def parse_class_mix(value, num_classes: int = 7) -> np.ndarray:
    """Accept a sequence of shares or ``"0:0.8,6:0.2"`` text; normalised to sum 1."""
    mix = np.zeros(num_classes)
    if isinstance(value, str):
        for part in value.split(","):
            k, v = part.split(":")
            mix[int(k)] = float(v)
    else:
        value = np.asarray(value, dtype=float)
        mix[: len(value)] = value
    if mix.sum() <= 0 or (mix < 0).any():
        raise ValueError(f"invalid class mix {value!r}")
    return mix / mix.sum()


def _cell_classes(rng: RngState, mix: np.ndarray, cells: int) -> np.ndarray:
    # systematic sampling: counts stay within one cell of mix * cells
    cum = np.cumsum(mix)
    cum[-1] = 1.0
    points = (rng.uniform() + np.arange(cells)) / cells
    classes = np.searchsorted(cum, points, side="right")
    return classes[rng.permutation(cells)]


def _convex_polygon_mask(rng: RngState, size: int, jitter: float) -> np.ndarray:
    j = jitter * size
    corners = np.array([[0, 0], [0, size], [size, size], [size, 0]], dtype=float)
    inward = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)
    verts = corners + inward * rng.uniform((4, 2), 0, j)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = np.ones((size, size), dtype=bool)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        cross = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
        inside &= cross <= 0
    return inside


def region_size(size: int) -> int:
    """Side of the square class regions: two backbone cells when the image allows it."""
    return 2 * CELL if size % (2 * CELL) == 0 else CELL


def synth_scene(rng: RngState, size: int, mix: np.ndarray, overlap_prob: float = 0.1,
                noise: float = 0.03, boundary_jitter: float = 0.08, mask_prob: float = 0.25,
                classes: np.ndarray | None = None):
    """One scene: (image 4xHxW, labels CxHxW, boundary 1xHxW, mask 1xHxW, class map HxW).

    ``classes`` fixes the region grid (``size // region_size(size)`` per side);
    otherwise it is drawn from ``mix``.
    """
    c = len(mix)
    tile = region_size(size)
    g = size // tile
    if classes is None:
        classes = _cell_classes(rng.substream("regions"), mix, g * g)
    classes = np.asarray(classes).reshape(g, g)
    class_map = np.kron(classes, np.ones((tile, tile), dtype=np.int64))
    labels = np.zeros((c, size, size), dtype=np.uint8)
    np.put_along_axis(labels, class_map[None], 1, axis=0)
    fg_classes = [j for j in range(1, c) if mix[j] > 0]
    half = tile // 2
    for (r, q), cls in np.ndenumerate(classes):
        if cls == 0 or rng.uniform() >= overlap_prob:
            continue
        others = [j for j in fg_classes if j != cls]
        if not others:
            continue
        extra = others[int(rng.integers(0, len(others)))]
        dr, dq = rng.integers(0, 2, size=2) * half
        labels[extra, r * tile + dr: r * tile + dr + half, q * tile + dq: q * tile + dq + half] = 1
    labels = with_background(labels)

    nir = 0.1 + 0.12 * np.arange(c)
    colors = np.concatenate([nir[:, None], PALETTE[:c] if c <= len(PALETTE) else
                             np.resize(PALETTE, (c, 3))], axis=1)          # C x 4
    image = colors[class_map].transpose(2, 0, 1) + rng.normal((4, size, size)) * noise
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    boundary = _convex_polygon_mask(rng, size, boundary_jitter)[None].astype(np.uint8)
    mask = np.ones((1, size, size), dtype=np.uint8)
    if rng.uniform() < mask_prob:
        h0, w0 = rng.integers(0, size, size=2)
        hh, ww = rng.integers(size // 8, size // 4 + 1, size=2)
        mask[0, h0:h0 + hh, w0:w0 + ww] = 0
    return image, labels, boundary, mask, class_map


def synth_classes(seed: int, count: int, size: int, class_mix) -> np.ndarray:
    """Region classes for a whole synthetic set, ``count x g x g``.

    Drawn jointly so the set as a whole follows ``class_mix`` to within one
    region per class; a class with a nonzero share appears at least once when
    there are enough regions.
    """
    mix = parse_class_mix(class_mix)
    g = size // region_size(size)
    return _cell_classes(RngState(seed).substream("synth", "regions"), mix, count * g * g).reshape(count, g, g)


def synth_dataset(seed: int, count: int, size: int, class_mix, overlap_prob: float = 0.1,
                  **scene_kw) -> SegmentationBatch:
    """In-memory synthetic set; identical to what :func:`synth_generate` writes."""
    if size % CELL:
        raise ValueError(f"image size {size} must be divisible by {CELL}")
    mix = parse_class_mix(class_mix)
    classes = synth_classes(seed, count, size, mix)
    base = RngState(seed).substream("synth")
    images, labels, valid = [], [], []
    for i in range(count):
        image, lab, boundary, mask, _ = synth_scene(base.substream(i), size, mix, overlap_prob,
                                                    classes=classes[i], **scene_kw)
        images.append(image)
        labels.append(lab)
        valid.append(boundary & mask)
    return SegmentationBatch(np.stack(images), np.stack(labels), np.stack(valid))


def synth_generate(out_dir, seed: int, count: int, size: int, class_mix, overlap_prob: float = 0.1,
                   **scene_kw) -> DatasetManifest:
    """Write ``count`` synthetic scenes plus ``manifest.txt`` under ``out_dir``."""
    if size % CELL:
        raise ValueError(f"image size {size} must be divisible by {CELL}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mix = parse_class_mix(class_mix)
    classes = synth_classes(seed, count, size, mix)
    base = RngState(seed).substream("synth")
    dirs = []
    for i in range(count):
        image, labels, boundary, mask, _ = synth_scene(base.substream(i), size, mix, overlap_prob,
                                                       classes=classes[i], **scene_kw)
        dirs.append(save_sample(out / f"sample_{i:05d}", image, labels, boundary, mask))
    write_manifest(out / "manifest.txt", dirs, out)
    return DatasetManifest(out, dirs)


# ------------------------------------------------------------------ sampling

def flip(batch_arrays, horizontal: bool, vertical: bool):
    out = []
    for a in batch_arrays:
        if horizontal:
            a = a[..., :, ::-1]
        if vertical:
            a = a[..., ::-1, :]
        out.append(np.ascontiguousarray(a))
    return out


def sample_patches(data: SegmentationBatch, patch_size: int, rng: RngState, flip_prob: float = 0.5,
                   batch_size: int = 1) -> Iterator[SegmentationBatch]:
    """One shuffled pass over ``data`` yielding random crops in batches.

    All random draws for the pass are taken up front, so the sequence depends
    only on ``rng``.
    """
    n, _, h, w = data.images.shape
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds image size {h}x{w}")
    order = rng.permutation(n)
    tops = rng.integers(0, h - patch_size + 1, size=n)
    lefts = rng.integers(0, w - patch_size + 1, size=n)
    flips = rng.random((n, 2)) < flip_prob
    for start in range(0, n, batch_size):
        imgs, labs, vals = [], [], []
        for k in range(start, min(start + batch_size, n)):
            i, t, l = order[k], tops[k], lefts[k]
            crop = [a[i, :, t:t + patch_size, l:l + patch_size] for a in (data.images, data.labels, data.valid)]
            im, lb, vd = flip(crop, flips[k, 0], flips[k, 1])
            imgs.append(im)
            labs.append(lb)
            vals.append(vd)
        yield SegmentationBatch(np.stack(imgs), np.stack(labs), np.stack(vals))


class PatchSampler:
    """Per-epoch patch streams keyed by ``(seed, epoch)``."""

    def __init__(self, data: SegmentationBatch, patch_size: int, batch_size: int, seed: int,
                 flip_prob: float = 0.5):
        self.data = data
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.flip_prob = flip_prob
        self.rng = RngState(seed).substream("patches")

    @property
    def iters_per_epoch(self) -> int:
        return math.ceil(len(self.data) / self.batch_size)

    def epoch(self, epoch: int) -> list[SegmentationBatch]:
        return list(sample_patches(self.data, self.patch_size, self.rng.substream(epoch),
                                   self.flip_prob, self.batch_size))
