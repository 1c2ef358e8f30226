"""Dataset ingestion, augmentation, and the procedural synthetic benchmark.

Native image formats are binary PGM (P5) and PPM (P6) with maxval 255; any
other source is expected to be converted to a ``root/<class>/<file>.p?m``
tree beforehand (see README). Pixel values are scaled to [0,1] on load.

Resizing uses corner-aligned bilinear sampling: output pixel ``i`` of ``n``
samples the source at ``i * (len-1) / (n-1)`` (top-left corner for n == 1),
interpolated in float64, so resized pixels are reproducible to within 1e-6.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DatasetError, PnmParseError


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def _parse_pnm_header(raw: bytes, path: str):
    """Returns (magic, width, height, maxval, payload offset)."""
    if len(raw) < 2 or raw[:1] != b"P" or raw[1:2] not in (b"5", b"6"):
        raise PnmParseError(f"{path}: not a binary PGM/PPM file")
    magic = raw[:2].decode("ascii")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise PnmParseError(f"{path}: truncated header")
        ch = raw[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in b"\r\n":
                pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise PnmParseError(f"{path}: unexpected byte {ch!r} in header")
    if pos >= len(raw) or raw[pos:pos + 1] not in b" \t\r\n":
        raise PnmParseError(f"{path}: missing whitespace after maxval")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise PnmParseError(f"{path}: unsupported maxval {maxval} (must be 255)")
    if width < 1 or height < 1:
        raise PnmParseError(f"{path}: bad dimensions {width}x{height}")
    return magic, width, height, maxval, pos


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into a float32 ``[C,H,W]`` array scaled to [0,1]."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, width, height, _, pos = _parse_pnm_header(raw, path)
    channels = 1 if magic == "P5" else 3
    need = width * height * channels
    payload = raw[pos:pos + need]
    if len(payload) != need:
        raise PnmParseError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if channels == 1:
        return arr.reshape(1, height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)


def write_pgm(path, image: np.ndarray):
    """Write a 2-d uint8 array (or [0,1] float) as a binary P5 file."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise DatasetError(f"write_pgm expects a single-channel image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path, image: np.ndarray):
    """Write a ``[3,H,W]`` uint8 array (or [0,1] float) as a binary P6 file."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DatasetError(f"write_ppm expects a [3,H,W] image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# resize and augmentation
# ---------------------------------------------------------------------------

def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a ``[C,H,W]`` array (float64 math)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    a = image.astype(np.float64)
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    v00 = a[:, y0][:, :, x0]
    v01 = a[:, y0][:, :, x1]
    v10 = a[:, y1][:, :, x0]
    v11 = a[:, y1][:, :, x1]
    out = (v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx
           + v10 * fy * (1 - fx) + v11 * fy * fx)
    return out.astype(np.float32)


@dataclass(frozen=True)
class AugmentSpec:
    """Random-crop-and-flip policy; resizing back is always bilinear."""
    crop_ratio: float = 0.875
    flip_horizontal: bool = False

    def __post_init__(self):
        if not 0.0 < self.crop_ratio <= 1.0:
            raise DatasetError(f"crop_ratio must be in (0,1], got {self.crop_ratio}")


def random_crop_flip(image: np.ndarray, spec: AugmentSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """Crop ``crop_ratio`` of each side at a uniform offset, resize back,
    then flip horizontally with probability 0.5 when enabled."""
    c, h, w = image.shape
    ch = max(1, int(round(spec.crop_ratio * h)))
    cw = max(1, int(round(spec.crop_ratio * w)))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    out = image[:, oy:oy + ch, ox:ox + cw]
    out = bilinear_resize(out, h, w)
    if spec.flip_horizontal and rng.random() < 0.5:
        out = out[:, :, ::-1].copy()
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class ClassRecord:
    name: str
    images: np.ndarray  # [N, C, H, W] float32 in [0,1]


@dataclass
class Dataset:
    classes: list

    def __post_init__(self):
        if not self.classes:
            raise DatasetError("dataset has no classes")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DatasetError("class names are not unique")
        shapes = {c.images.shape[1:] for c in self.classes}
        if len(shapes) != 1:
            raise DatasetError(f"images disagree on shape: {sorted(shapes)}")
        for c in self.classes:
            if len(c.images) < 1:
                raise DatasetError(f"class {c.name!r} has no images")

    @property
    def image_shape(self):
        return self.classes[0].images.shape[1:]

    @property
    def num_classes(self):
        return len(self.classes)


_PNM_EXTS = (".pgm", ".ppm")


def load_directory_dataset(root, image_size: int) -> Dataset:
    """Load ``root/<class>/<file>.pgm|.ppm`` into uniform resized classes.

    Classes and files are visited in lexicographic order, so the same tree
    always yields the same dataset.
    """
    root = os.fspath(root)
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} is not a directory")
    class_dirs = sorted(d for d in os.listdir(root)
                        if os.path.isdir(os.path.join(root, d)))
    if not class_dirs:
        raise DatasetError(f"dataset root {root!r} has no class directories")
    classes = []
    for name in class_dirs:
        cdir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(cdir)
                       if f.lower().endswith(_PNM_EXTS))
        if not files:
            raise DatasetError(f"class directory {cdir!r} has no PGM/PPM files")
        images = [bilinear_resize(read_pnm(os.path.join(cdir, f)), image_size, image_size)
                  for f in files]
        channels = {img.shape[0] for img in images}
        if len(channels) != 1:
            raise DatasetError(f"class {name!r} mixes channel counts {sorted(channels)}")
        classes.append(ClassRecord(name=name, images=np.stack(images)))
    return Dataset(classes=classes)


def rotation_class_augment(dataset: Dataset) -> Dataset:
    """Turn every class into four: the original plus exact 90/180/270-degree
    rotations, each a distinct new class."""
    c, h, w = dataset.image_shape
    if h != w:
        raise ContractError(f"rotation augmentation needs square images, got {h}x{w}")
    classes = []
    for k, suffix in ((0, ""), (1, "_rot090"), (2, "_rot180"), (3, "_rot270")):
        for cls in dataset.classes:
            imgs = cls.images if k == 0 else np.ascontiguousarray(
                np.rot90(cls.images, k=k, axes=(2, 3)))
            classes.append(ClassRecord(name=cls.name + suffix, images=imgs))
    return Dataset(classes=classes)


# ---------------------------------------------------------------------------
# synthetic shape corpus
# ---------------------------------------------------------------------------

def _shape_mask(family: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    if family == "disk":
        return dist <= r
    if family == "ring":
        return np.abs(dist - r) <= 0.35 * r
    if family == "cross":
        return ((np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)) | \
               ((np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r))
    if family == "bar_h":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
    if family == "bar_v":
        return (np.abs(dx) <= 0.3 * r) & (np.abs(dy) <= r)
    if family == "checker":
        inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        q = max(r / 2.0, 1.0)
        cells = (np.floor(dy / q) + np.floor(dx / q)).astype(np.int64) % 2 == 0
        return inside & cells
    if family == "stripes_diag":
        inside = dist <= r
        q = max(r / 2.0, 1.0)
        bands = np.floor((dy + dx) / q).astype(np.int64) % 2 == 0
        return inside & bands
    if family == "hollow_square":
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        return (cheb <= r) & (cheb >= 0.55 * r)
    if family == "x_cross":
        inside = np.maximum(np.abs(dy), np.abs(dx)) <= r
        return inside & ((np.abs(dy - dx) <= 0.4 * r) | (np.abs(dy + dx) <= 0.4 * r))
    if family == "blob_pair":
        d1 = np.hypot(dy, dx - 0.55 * r)
        d2 = np.hypot(dy, dx + 0.55 * r)
        return (d1 <= 0.45 * r) | (d2 <= 0.45 * r)
    if family == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if family == "l_corner":
        v = (np.abs(dx + 0.65 * r) <= 0.35 * r) & (np.abs(dy) <= r)
        hbar = (np.abs(dy - 0.65 * r) <= 0.35 * r) & (np.abs(dx) <= r)
        return v | hbar
    raise DatasetError(f"unknown shape family {family!r}")


SHAPE_FAMILIES = ("disk", "ring", "cross", "bar_h", "bar_v", "checker",
                  "stripes_diag", "hollow_square", "x_cross", "blob_pair",
                  "triangle", "l_corner")


def synthetic_shapes_generate(num_classes: int, images_per_class: int,
                              image_size: int, seed: int,
                              with_boxes: bool = False):
    """Procedural grayscale corpus: one shape family per class, randomized
    position and scale (+-30%), additive noise sigma=0.05, values in [0,1].

    With ``with_boxes=True`` also returns, per class, an ``[N,4]`` array of
    (row0, col0, row1, col1) half-open ground-truth bounding boxes.
    """
    if num_classes > len(SHAPE_FAMILIES):
        raise DatasetError(
            f"at most {len(SHAPE_FAMILIES)} shape families available, asked for {num_classes}")
    rng = np.random.default_rng(seed)
    base_r = 0.22 * image_size
    margin = base_r * 1.3 + 1.0
    classes = []
    boxes = []
    for k in range(num_classes):
        family = SHAPE_FAMILIES[k]
        imgs = np.empty((images_per_class, 1, image_size, image_size), dtype=np.float32)
        cls_boxes = np.empty((images_per_class, 4), dtype=np.int64)
        for i in range(images_per_class):
            cy = rng.uniform(margin, image_size - margin)
            cx = rng.uniform(margin, image_size - margin)
            r = base_r * rng.uniform(0.7, 1.3)
            intensity = rng.uniform(0.6, 1.0)
            mask = _shape_mask(family, image_size, cy, cx, r)
            canvas = mask.astype(np.float64) * intensity
            canvas += rng.normal(0.0, 0.05, size=canvas.shape)
            imgs[i, 0] = np.clip(canvas, 0.0, 1.0).astype(np.float32)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            cls_boxes[i] = (rows[0], cols[0], rows[-1] + 1, cols[-1] + 1)
        classes.append(ClassRecord(name=family, images=imgs))
        boxes.append(cls_boxes)
    dataset = Dataset(classes=classes)
    if with_boxes:
        return dataset, boxes
    return dataset


def grayscale(image: np.ndarray) -> np.ndarray:
    """Collapse ``[C,H,W]`` to ``[H,W]`` by the channel mean."""
    return image.mean(axis=0)
