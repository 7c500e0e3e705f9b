"""Dataset indexing, splitting, preprocessing, augmentation and balancing."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .layers import RngState

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
SPLITS = ("train", "val", "test")
SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)

# Kaggle/OASIS folder names for the 3- and 2-class setups
MERGE_PRESETS = {
    "kaggle3": {"MildDemented": "ModerateDemented"},
    "kaggle2": {"VeryMildDemented": "Demented", "MildDemented": "Demented", "ModerateDemented": "Demented"},
}


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Entry:
    path: str
    label: str
    split: str = ""
    augment: "AugmentParams | None" = None
    source_index: int = -1


@dataclass
class DatasetManifest:
    entries: list[Entry]
    class_names: list[str]
    seed: int | None = None
    root: Path | None = None

    def label_index(self, label: str) -> int:
        return self.class_names.index(label)

    def select(self, split: str) -> list[Entry]:
        return [e for e in self.entries if e.split == split]

    def counts(self, split: str | None = None) -> dict[str, int]:
        out = {c: 0 for c in self.class_names}
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] += 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "label", "split"])
        for e in self.entries:
            if e.augment is None:
                w.writerow([e.path, e.label, e.split])
        return buf.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode("utf-8")).hexdigest()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def read(cls, path, root=None) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8")
        rows = list(csv.DictReader(io.StringIO(text)))
        if rows and set(rows[0]) != {"path", "label", "split"}:
            raise ValueError(f"{path}: expected header path,label,split")
        entries = [Entry(r["path"], r["label"], r["split"]) for r in rows]
        for e in entries:
            if e.split not in SPLITS:
                raise ValueError(f"{path}: bad split {e.split!r}")
        return cls(entries, sorted({e.label for e in entries}), root=Path(root) if root else None)


def scan_dataset(root, merge: dict[str, str] | None = None) -> DatasetManifest:
    """Index ``root/<class>/<image>``; optionally merge classes by name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"{root}: no class directories")
    names = [d.name for d in dirs]
    merge = dict(merge or {})
    for src in merge:
        if src not in names:
            raise ValueError(f"merge source {src!r} is not a class directory")
    entries = []
    for d in dirs:
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"{d}: empty class directory")
        label = merge.get(d.name, d.name)
        entries += [Entry(p.relative_to(root).as_posix(), label) for p in files]
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(entries, sorted({e.label for e in entries}), root=root)


def parse_merge(text: str) -> dict[str, str]:
    """``"A->B,C->B"`` or a preset name -> mapping."""
    text = text.strip()
    if not text:
        return {}
    if text in MERGE_PRESETS:
        return dict(MERGE_PRESETS[text])
    out = {}
    for part in text.split(","):
        src, sep, dst = part.partition("->")
        if not sep or not src.strip() or not dst.strip():
            raise ValueError(f"bad merge rule {part!r}")
        out[src.strip()] = dst.strip()
    return out


def split_quotas(n: int, test_frac: float, val_frac: float) -> tuple[int, int, int]:
    """(test, val, train) sizes by floor + largest remainder."""
    quotas = [n * test_frac, n * (1 - test_frac) * val_frac, n * (1 - test_frac) * (1 - val_frac)]
    sizes = [math.floor(q + 1e-9) for q in quotas]
    rema = [q - s for q, s in zip(quotas, sizes)]
    for i in sorted(range(3), key=lambda i: -rema[i])[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes[0], sizes[1], sizes[2]


def split(manifest: DatasetManifest, seed: int = 43, test_frac: float = 0.15, val_frac: float = 0.15) -> DatasetManifest:
    """Stratified test/val/train assignment; test is carved first."""
    if not (0 < test_frac < 1 and 0 < val_frac < 1):
        raise ValueError("fractions must be in (0, 1)")
    rng = RngState(seed).generator
    out = []
    for name in manifest.class_names:
        items = sorted((e for e in manifest.entries if e.label == name and e.augment is None), key=lambda e: e.path)
        if len(items) < 3:
            warnings.warn(f"class {name!r} has {len(items)} samples; some splits stay empty", stacklevel=2)
        n_test, n_val, _ = split_quotas(len(items), test_frac, val_frac)
        order = rng.permutation(len(items))
        for rank, i in enumerate(order):
            tag = "test" if rank < n_test else "val" if rank < n_test + n_val else "train"
            out.append(replace(items[i], split=tag))
    out.sort(key=lambda e: e.path)
    return DatasetManifest(out, list(manifest.class_names), seed=seed, root=manifest.root)


# ---------------------------------------------------------------- image ops


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup at float pixel coordinates, clamped to the nearest edge."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize (same size is an exact copy)."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    ys = (np.arange(height) + 0.5) * (h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (w / width) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _sample_bilinear(img.astype(np.float64), yy, xx)


def sharpen(img: np.ndarray) -> np.ndarray:
    """Cross-shaped sharpening kernel per channel, replicate border, clamp [0,1]."""
    img = np.asarray(img)
    was2d = img.ndim == 2
    x = img[..., None] if was2d else img
    p = np.pad(x.astype(np.float64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    c = p[1:-1, 1:-1]
    # 5c - sum(neighbours), written so flat regions come back bit-exact
    out = c + ((c - p[:-2, 1:-1]) + (c - p[2:, 1:-1])) + ((c - p[1:-1, :-2]) + (c - p[1:-1, 2:]))
    out = np.clip(out, 0.0, 1.0).astype(img.dtype if img.dtype.kind == "f" else np.float64)
    return out[..., 0] if was2d else out


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 0.0  # degrees
    width_shift: float = 0.0  # fraction of width
    height_shift: float = 0.0
    shear: float = 0.0
    zoom: float = 1.0
    hflip: bool = False

    RANGES = {
        "rotation": (-15.0, 15.0),
        "width_shift": (-0.1, 0.1),
        "height_shift": (-0.1, 0.1),
        "shear": (-0.2, 0.2),
        "zoom": (0.8, 1.2),
    }

    def validate(self) -> None:
        for key, (lo, hi) in self.RANGES.items():
            v = getattr(self, key)
            if not lo <= v <= hi:
                raise ValueError(f"{key}={v} outside [{lo}, {hi}]")

    @classmethod
    def random(cls, rng: np.random.Generator) -> "AugmentParams":
        r = cls.RANGES
        return cls(
            rotation=float(rng.uniform(*r["rotation"])),
            width_shift=float(rng.uniform(*r["width_shift"])),
            height_shift=float(rng.uniform(*r["height_shift"])),
            shear=float(rng.uniform(*r["shear"])),
            zoom=float(rng.uniform(*r["zoom"])),
            hflip=bool(rng.random() < 0.5),
        )

    def is_identity(self) -> bool:
        return self == AugmentParams()


@dataclass
class ImageSample:
    pixels: np.ndarray  # [H, W, 3] in [0, 1]
    label: int
    provenance: str = "original"
    source: str | None = None
    params: AugmentParams | None = None


def affine_matrix(params: AugmentParams, height: int, width: int) -> np.ndarray:
    """3x3 map from output (x, y) to source (x, y) pixel coordinates."""
    cy, cx = (height - 1) / 2, (width - 1) / 2
    th = math.radians(params.rotation)
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1]])
    shear = np.array([[1, -math.sin(params.shear), 0], [0, math.cos(params.shear), 0], [0, 0, 1]])
    zoom = np.diag([params.zoom, params.zoom, 1.0])
    shift = np.array([[1, 0, params.width_shift * width], [0, 1, params.height_shift * height], [0, 0, 1]])
    to_c = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    from_c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]])
    # forward transform of content: shift . rotation . shear . zoom about the centre
    fwd = shift @ from_c @ rot @ shear @ zoom @ to_c
    return np.linalg.inv(fwd)


def augment(sample: ImageSample, params: AugmentParams) -> ImageSample:
    params.validate()
    img = sample.pixels
    h, w = img.shape[:2]
    geometric = replace(params, hflip=False)
    if geometric.is_identity():
        out = img.copy()
    else:
        inv = affine_matrix(geometric, h, w)
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2]
        sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2]
        out = _sample_bilinear(img.astype(np.float64), sy, sx).astype(img.dtype)
    if params.hflip:
        out = out[:, ::-1].copy()
    return ImageSample(out, sample.label, "augmented", sample.source, params)


# ---------------------------------------------------------------- preprocessing


def load_image(path) -> np.ndarray:
    """Decode to float64 RGB in the 0..255 range."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F", "1", "P", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                arr = np.repeat(arr[..., None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as e:
        raise ValueError(f"cannot decode {path}: {e}") from None
    return arr


def preprocess(path, size: int = 128, do_sharpen: bool = False, label: int = -1) -> ImageSample:
    arr = resize_bilinear(load_image(path), size, size) / 255.0
    if do_sharpen:
        arr = sharpen(arr)
    return ImageSample(arr.astype(np.float32), label, source=str(path))


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- balancing


def balance_targets(counts: dict[str, int], threshold: float = 10.0) -> dict[str, int]:
    """Raise each class below the second-largest count ``S2`` to ``S2``, or to
    ``ceil(S2 / 3)`` when ``S2 / count`` exceeds ``threshold``."""
    if len(counts) < 2:
        raise ValueError("balancing needs at least two classes")
    s2 = sorted(counts.values(), reverse=True)[1]
    out = {}
    for name, c in counts.items():
        if c == 0 or c >= s2:
            out[name] = c
        elif s2 / c <= threshold:
            out[name] = s2
        else:
            out[name] = max(c, math.ceil(s2 / 3))
    return out


def balance_training_set(manifest: DatasetManifest, rng: RngState, threshold: float = 10.0) -> DatasetManifest:
    """Append augmented train copies per :func:`balance_targets`; val/test untouched."""
    train = [e for e in manifest.entries if e.split == "train" and e.augment is None]
    counts = {c: 0 for c in manifest.class_names}
    for e in train:
        counts[e.label] += 1
    targets = balance_targets(counts, threshold)
    index = {e.path: i for i, e in enumerate(manifest.entries)}
    extra = []
    for ci, name in enumerate(manifest.class_names):
        deficit = targets[name] - counts[name]
        if deficit <= 0:
            continue
        pool = [e for e in train if e.label == name]
        for j in range(deficit):
            g = rng.split(ci, j).generator
            src = pool[int(g.integers(len(pool)))]
            extra.append(Entry(src.path, name, "train", AugmentParams.random(g), index[src.path]))
    return DatasetManifest(manifest.entries + extra, list(manifest.class_names), manifest.seed, manifest.root)


# ---------------------------------------------------------------- volumes

VOLUME_MAGIC = b"AVOL"
PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}


@dataclass
class Volume:
    voxels: np.ndarray  # [D, H, W]
    plane: str = "axial"

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError("volume must be a nonempty 3-D array")
        if self.plane not in PLANE_AXIS:
            raise ValueError(f"unknown plane {self.plane!r}")


def write_volume(path, voxels: np.ndarray) -> None:
    d, h, w = voxels.shape
    data = struct.pack("<4sIII", VOLUME_MAGIC, d, h, w) + np.asarray(voxels, dtype="<u2").tobytes()
    Path(path).write_bytes(data)


def read_volume(path, plane: str = "axial") -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an AVOL volume")
    d, h, w = struct.unpack("<III", raw[4:16])
    payload = raw[16:]
    if len(payload) != d * h * w * 2:
        raise ValueError(f"{path}: payload {len(payload)} bytes, expected {d * h * w * 2}")
    return Volume(np.frombuffer(payload, dtype="<u2").reshape(d, h, w).astype(np.uint16), plane)


def middle_slice_indices(depth: int, k: int) -> range:
    if not 1 <= k <= depth:
        raise ValueError(f"cannot take {k} slices from depth {depth}")
    start = (depth - k) // 2
    return range(start, start + k)


def select_middle_slices(vol: Volume, k: int) -> list[np.ndarray]:
    axis = PLANE_AXIS[vol.plane]
    return [np.take(vol.voxels, i, axis=axis) for i in middle_slice_indices(vol.voxels.shape[axis], k)]


# ---------------------------------------------------------------- loading


@dataclass
class ImageStore:
    """Preprocessed-image cache with an access log of (split, path, purpose)."""

    root: Path
    size: int = 128
    do_sharpen: bool = False
    cache: dict[str, np.ndarray] = field(default_factory=dict)
    access_log: list[tuple[str, str, str]] = field(default_factory=list)

    def load(self, entry: Entry, purpose: str) -> np.ndarray:
        self.access_log.append((entry.split, entry.path, purpose))
        if entry.path not in self.cache:
            self.cache[entry.path] = preprocess(Path(self.root) / entry.path, self.size, self.do_sharpen).pixels
        img = self.cache[entry.path]
        if entry.augment is not None:
            img = augment(ImageSample(img, -1), entry.augment).pixels
        return img

    def arrays(self, manifest: DatasetManifest, split_name: str, purpose: str) -> tuple[np.ndarray, np.ndarray]:
        entries = manifest.select(split_name)
        if not entries:
            return np.zeros((0, self.size, self.size, 3), np.float32), np.zeros(0, np.int64)
        x = np.stack([self.load(e, purpose) for e in entries]).astype(np.float32)
        y = np.array([manifest.label_index(e.label) for e in entries], dtype=np.int64)
        return x, y
