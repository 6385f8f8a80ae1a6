"""Synthetic corpus, on-disk format and evaluation metrics.

Each image shows an elliptical target (bright) inside a larger elliptical
context region of similar but dimmer intensity, on a noisy background with a
smooth intensity bias. Consecutive slices are grouped into volumes that
share geometry, with the target size varying across slices. Target-absent
slices contain background only.

Layout on disk::

    <root>/manifest.json
    <root>/images/<id>.f64   8-byte magic, uint32 H, uint32 W, H*W float64 (all little-endian)
    <root>/masks/<id>.pgm    16-bit binary PGM (P5, maxval 65535)
    <root>/weak/<id>.pgm     same, 1 = labeled target pixel, 0 = unlabeled
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import weak_labels

FORMAT_VERSION = 1
IMAGE_MAGIC = b"WSIMGF64"


@dataclass(frozen=True)
class GeneratorParams:
    train_n: int = 200
    val_n: int = 50
    size: int = 64
    absent_frac: float = 0.2
    slices_per_volume: int = 5
    target_area: tuple[float, float] = (60.0, 500.0)
    context_axes: tuple[float, float] = (22.0, 34.0)
    background_intensity: float = 0.0
    context_intensity: float = 0.7
    target_intensity: float = 1.0
    noise: float = 0.15
    bias_amplitude: float = 0.2

    def validate(self) -> None:
        if self.train_n < 1 or self.val_n < 0:
            raise ValueError(f"invalid counts train_n={self.train_n}, val_n={self.val_n}")
        if self.size < 8:
            raise ValueError(f"image size {self.size} too small")
        if not 0 <= self.absent_frac < 1:
            raise ValueError(f"absent_frac must be in [0, 1), got {self.absent_frac}")
        if self.slices_per_volume < 1:
            raise ValueError("slices_per_volume must be >= 1")


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    group: int
    split: str
    weak: np.ndarray | None = None
    slice_index: int = 0

    @property
    def present(self) -> bool:
        return bool(self.mask.any())

    @property
    def true_size(self) -> int:
        return int(self.mask.sum())


@dataclass
class Dataset:
    samples: list[Sample]
    height: int
    width: int
    generator: dict = field(default_factory=dict)
    weak_info: dict | None = None
    root: Path | None = None
    mean: float = 0.0
    std: float = 1.0

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> list[Sample]:
        return self.split("train")

    @property
    def val(self) -> list[Sample]:
        return self.split("val")

    @property
    def domain_size(self) -> int:
        return self.height * self.width

    def normalized(self, samples: Sequence[Sample]) -> np.ndarray:
        """Images of ``samples`` as ``[N, 1, H, W]`` after z-score normalisation."""
        imgs = np.stack([s.image for s in samples])[:, None]
        return (imgs - self.mean) / self.std


# ---------------------------------------------------------------------------
# generation


def _ellipse(shape, center, axes, angle) -> np.ndarray:
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _absent_flags(n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    k = int(round(frac * n))
    flags = np.zeros(n, dtype=bool)
    flags[rng.permutation(n)[:k]] = True
    return flags


def _volume(params: GeneratorParams, rng: np.random.Generator, n_slices: int):
    """Geometry shared by the slices of one volume."""
    size = params.size
    half = size / 2.0
    ctx_axes = rng.uniform(*params.context_axes, size=2)
    ctx_center = half + rng.uniform(-4, 4, size=2)
    ctx_angle = rng.uniform(0, np.pi)
    base_area = np.exp(rng.uniform(*np.log(params.target_area)))
    ratio = rng.uniform(0.6, 1.0)
    # a*b = area/pi with b = ratio*a
    major = np.sqrt(base_area / (np.pi * ratio))
    room = max(0.0, min(ctx_axes) - major - 2.0)
    offset = rng.uniform(-1, 1, size=2) * room * 0.5
    tgt_center = ctx_center + offset
    tgt_angle = rng.uniform(0, np.pi)
    # slice profile: size shrinks towards the ends of the volume
    z = np.linspace(-0.7, 0.7, n_slices) if n_slices > 1 else np.zeros(1)
    scale = np.sqrt(1.0 - z**2)
    slices = []
    for k in range(n_slices):
        jitter = rng.normal(0, 0.7, size=2)
        slices.append(
            dict(
                ctx=(ctx_center + jitter, ctx_axes * (0.9 + 0.1 * scale[k]), ctx_angle),
                tgt=(tgt_center + jitter, (major * scale[k], major * ratio * scale[k]), tgt_angle),
            )
        )
    return slices


def _render(params: GeneratorParams, geom, absent: bool, rng: np.random.Generator):
    size = params.size
    shape = (size, size)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0) - 0.5
    gy, gx = rng.normal(0, 1, size=2)
    bias = params.bias_amplitude * (gy * yy + gx * xx)
    image = np.full(shape, params.background_intensity) + bias
    mask = np.zeros(shape, dtype=np.uint8)
    if not absent:
        ctx = _ellipse(shape, *geom["ctx"])
        tgt = _ellipse(shape, *geom["tgt"]) & ctx
        if not tgt.any():
            cy, cx = np.clip(np.round(geom["tgt"][0]).astype(int), 0, size - 1)
            tgt[cy, cx] = True
        image[ctx] = params.context_intensity + bias[ctx]
        image[tgt] = params.target_intensity + bias[tgt]
        mask = tgt.astype(np.uint8)
    image = image + rng.normal(0, params.noise, size=shape)
    return image, mask


def generate_dataset(params: GeneratorParams = GeneratorParams(), seed: int = 0) -> Dataset:
    """Deterministic synthetic corpus for ``seed``.

    Exactly ``round(absent_frac * n)`` slices of each split are target-absent.
    Volume (group) ids are unique across splits, training volumes first.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    group = 0
    for split, n in (("train", params.train_n), ("val", params.val_n)):
        absent = _absent_flags(n, params.absent_frac, rng)
        idx = 0
        while idx < n:
            n_slices = min(params.slices_per_volume, n - idx)
            for k, geom in enumerate(_volume(params, rng, n_slices)):
                image, mask = _render(params, geom, absent[idx], rng)
                samples.append(
                    Sample(f"{split}_{idx:04d}", image, mask, group, split, slice_index=k)
                )
                idx += 1
            group += 1
    ds = Dataset(samples, params.size, params.size, generator=dict(asdict(params), seed=seed))
    fit_normalization(ds)
    return ds


def fit_normalization(ds: Dataset) -> None:
    """Z-score statistics from the training images."""
    train = ds.train or ds.samples
    pixels = np.stack([s.image for s in train])
    ds.mean = float(pixels.mean())
    ds.std = float(pixels.std()) or 1.0


# ---------------------------------------------------------------------------
# weak labels


def weaken(ds: Dataset, strategy: str = "erosion", seed: int = 0, kernel_sizes=weak_labels.DEFAULT_KERNELS) -> list[str]:
    """Attach weak masks to every sample; returns warnings for samples left tag-only."""
    warnings = []
    rng = np.random.default_rng(seed)
    for s in ds.samples:
        if not s.present:
            s.weak = np.zeros_like(s.mask)
            continue
        if strategy == "erosion":
            try:
                s.weak, _ = weak_labels.erode_label(s.mask, kernel_sizes)
            except weak_labels.WeakLabelError as exc:
                warnings.append(f"{s.id}: {exc}; sample kept tag-only")
                s.weak = np.zeros_like(s.mask)
        elif strategy == "point":
            s.weak = weak_labels.random_point_label(s.mask, rng)
        else:
            raise ValueError(f"unknown weak-label strategy {strategy!r}")
    ds.weak_info = {"strategy": strategy, "seed": seed}
    return warnings


# ---------------------------------------------------------------------------
# metrics


def binarize(fg, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the probability is strictly above ``threshold``."""
    return np.asarray(fg) > threshold


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# persistence


def write_image(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def read_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise ValueError(f"{path}: bad image magic")
    h, w = struct.unpack("<II", raw[8:16])
    data = np.frombuffer(raw[16:], dtype="<f8")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


def write_pgm(path: Path, mask: np.ndarray) -> None:
    # Netpbm stores 16-bit samples most significant byte first
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(mask, dtype=">u2").tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw[pos:], dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} samples, found {data.size}")
    return data.reshape(h, w).astype(np.uint8)


def _record(s: Sample) -> dict:
    rec = {
        "id": s.id,
        "split": s.split,
        "group": s.group,
        "slice": s.slice_index,
        "present": s.present,
        "true_size": s.true_size,
        "image": f"images/{s.id}.f64",
        "mask": f"masks/{s.id}.pgm",
        "weak": None,
        "weak_size": None,
    }
    if s.weak is not None:
        rec["weak"] = f"weak/{s.id}.pgm"
        rec["weak_size"] = int((s.weak > 0).sum())
    return rec


def manifest(ds: Dataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "height": ds.height,
        "width": ds.width,
        "generator": ds.generator,
        "weak": ds.weak_info,
        "samples": [_record(s) for s in ds.samples],
    }


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    """Write every sample plus ``manifest.json``; returns the manifest path."""
    root = Path(root)
    for sub in ("images", "masks", "weak"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        write_image(root / "images" / f"{s.id}.f64", s.image)
        write_pgm(root / "masks" / f"{s.id}.pgm", s.mask)
        if s.weak is not None:
            write_pgm(root / "weak" / f"{s.id}.pgm", s.weak)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest(ds), indent=1) + "\n")
    ds.root = root
    return path


def load_dataset(root: str | Path) -> Dataset:
    """Read a corpus and check every manifest entry against its files."""
    root = Path(root)
    meta = json.loads((root / "manifest.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported format version {meta.get('format_version')}")
    samples = []
    for rec in meta["samples"]:
        image = read_image(root / rec["image"])
        mask = read_pgm(root / rec["mask"])
        if int(mask.sum()) != rec["true_size"]:
            raise ValueError(f"{rec['id']}: manifest size {rec['true_size']} != mask count {int(mask.sum())}")
        weak = read_pgm(root / rec["weak"]) if rec.get("weak") else None
        if weak is not None and np.any(weak.astype(bool) & ~mask.astype(bool)):
            raise ValueError(f"{rec['id']}: weak label outside the target")
        samples.append(
            Sample(rec["id"], image, mask, rec["group"], rec["split"], weak, rec.get("slice", 0))
        )
    ds = Dataset(samples, meta["height"], meta["width"], meta.get("generator", {}), meta.get("weak"), root)
    fit_normalization(ds)
    return ds


def iter_groups(samples: Iterable[Sample]) -> dict[int, list[Sample]]:
    groups: dict[int, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.group, []).append(s)
    return groups
