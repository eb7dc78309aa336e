"""Multispectral rasters, preprocessing, the synthetic scene generator and on-disk formats."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _accel
from .errors import EmptyDataset, FormatError, InconsistentBands, InvalidConfig, MissingBand

REFLECTANCE_SCALE = 10000.0
RGB_CLIP_MAX = 2000.0
STD_FLOOR = 1e-6
SPLITS = ("train", "val", "test")


class Band(str, Enum):
    B1 = "B1"
    B2 = "B2"
    B3 = "B3"
    B4 = "B4"
    B5 = "B5"
    B6 = "B6"
    B7 = "B7"
    B8 = "B8"
    B8A = "B8A"
    B9 = "B9"
    B10 = "B10"
    B11 = "B11"
    B12 = "B12"

    @property
    def resolution_m(self) -> int:
        return _RESOLUTION[self]

    def __str__(self) -> str:
        return self.value


_RESOLUTION = {
    Band.B1: 60, Band.B9: 60, Band.B10: 60,
    Band.B5: 20, Band.B6: 20, Band.B7: 20, Band.B8A: 20, Band.B11: 20, Band.B12: 20,
    Band.B2: 10, Band.B3: 10, Band.B4: 10, Band.B8: 10,
}

RGB_BANDS: tuple[Band, ...] = (Band.B4, Band.B3, Band.B2)
# 10 m and 20 m bands: the 60 m coastal aerosol / vapour / cirrus bands removed
DEFAULT_10_BANDS: tuple[Band, ...] = (
    Band.B2, Band.B3, Band.B4, Band.B5, Band.B6, Band.B7, Band.B8, Band.B8A, Band.B11, Band.B12,
)
DEFAULT_12_BANDS: tuple[Band, ...] = (
    Band.B1, Band.B2, Band.B3, Band.B4, Band.B5, Band.B6, Band.B7, Band.B8, Band.B8A,
    Band.B10, Band.B11, Band.B12,
)


def as_bands(names: Iterable[str | Band]) -> tuple[Band, ...]:
    """Parse band names; raises InvalidConfig on unknown or duplicated names."""
    out = []
    for n in names:
        try:
            out.append(Band(str(n).strip().upper()))
        except ValueError:
            raise InvalidConfig(f"unknown band name {n!r}") from None
    if len(set(out)) != len(out):
        raise InvalidConfig(f"duplicate band names in {[b.value for b in out]}")
    return tuple(out)


def parse_band_list(spec: str) -> tuple[Band, ...]:
    """Accept ``rgb``, ``10``, ``12`` or a comma separated list such as ``B4,B3,B2``."""
    key = spec.strip().lower()
    if key in ("rgb", "3"):
        return RGB_BANDS
    if key in ("10", "ms10"):
        return DEFAULT_10_BANDS
    if key in ("12", "ms12"):
        return DEFAULT_12_BANDS
    return as_bands(s for s in spec.split(",") if s.strip())


@dataclass(frozen=True)
class MultispectralImage:
    bands: tuple[Band, ...]
    values: np.ndarray

    def __post_init__(self):
        bands = as_bands(self.bands)
        values = np.asarray(self.values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if values.ndim != 3 or values.shape[0] != len(bands):
            raise InconsistentBands(
                f"values shape {values.shape} does not match {len(bands)} bands")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def index(self, band: Band | str) -> int:
        b = Band(str(band))
        try:
            return self.bands.index(b)
        except ValueError:
            raise MissingBand(b.value) from None

    def plane(self, band: Band | str) -> np.ndarray:
        return self.values[self.index(band)]


def select_bands(image: MultispectralImage, subset: Sequence[Band | str]) -> MultispectralImage:
    idx = [image.index(b) for b in subset]
    return MultispectralImage(tuple(image.bands[i] for i in idx), image.values[idx].copy())


def to_rgb_uint8(image: MultispectralImage) -> np.ndarray:
    """(3, H, W) uint8 display raster in B4, B3, B2 order; 0..2000 maps to 0..255."""
    rgb = select_bands(image, RGB_BANDS).values.astype(np.float64)
    scaled = np.clip(rgb, 0.0, RGB_CLIP_MAX) * (255.0 / RGB_CLIP_MAX)
    return np.floor(scaled + 0.5).astype(np.uint8)


def resize_bicubic(image: MultispectralImage, out_h: int, out_w: int) -> MultispectralImage:
    """Per-band cubic convolution (a=-0.5), edge clamped, pixel-centre aligned."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    src = np.ascontiguousarray(image.values, dtype=np.float64)
    out = _accel.resize_stack(src, int(out_h), int(out_w))
    return MultispectralImage(image.bands, out.astype(image.values.dtype, copy=False))


@dataclass(frozen=True)
class NormalizationStats:
    mean: dict[Band, float]
    std: dict[Band, float]

    def __post_init__(self):
        if set(self.mean) != set(self.std):
            raise ValueError("mean and std must cover the same bands")
        for b, s in self.std.items():
            if not s > 0:
                raise ValueError(f"std for {b} must be positive, got {s}")

    def arrays(self, bands: Sequence[Band | str]) -> tuple[np.ndarray, np.ndarray]:
        try:
            m = np.array([self.mean[Band(str(b))] for b in bands], dtype=np.float64)
            s = np.array([self.std[Band(str(b))] for b in bands], dtype=np.float64)
        except KeyError as e:
            raise MissingBand(str(e.args[0])) from None
        return m, s

    def to_json(self) -> dict:
        return {"mean": {b.value: v for b, v in self.mean.items()},
                "std": {b.value: v for b, v in self.std.items()}}

    @classmethod
    def from_json(cls, obj: Mapping) -> "NormalizationStats":
        return cls({Band(k): float(v) for k, v in obj["mean"].items()},
                   {Band(k): float(v) for k, v in obj["std"].items()})


def normalize(image: MultispectralImage, stats: NormalizationStats) -> MultispectralImage:
    mean, std = stats.arrays(image.bands)
    out = (image.values.astype(np.float64) - mean[:, None, None]) / std[:, None, None]
    return MultispectralImage(image.bands, out)


def compute_stats(dataset: Iterable[MultispectralImage]) -> NormalizationStats:
    """Per-band mean and population std over every pixel of every image."""
    images = list(dataset)
    if not images:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    bands = images[0].bands
    for im in images[1:]:
        if im.bands != bands:
            raise InconsistentBands(f"band lists differ: {bands} vs {im.bands}")
    count = sum(im.height * im.width for im in images)
    total = np.zeros(len(bands))
    for im in images:
        total += im.values.astype(np.float64).sum(axis=(1, 2))
    mean = total / count
    sq = np.zeros(len(bands))
    for im in images:
        d = im.values.astype(np.float64) - mean[:, None, None]
        sq += (d * d).sum(axis=(1, 2))
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return NormalizationStats({b: float(m) for b, m in zip(bands, mean)},
                              {b: float(s) for b, s in zip(bands, std)})


def scale_reflectance(image: MultispectralImage) -> MultispectralImage:
    return MultispectralImage(image.bands, image.values.astype(np.float64) / REFLECTANCE_SCALE)


def model_input(images: Sequence[MultispectralImage], bands: Sequence[Band | str],
                stats: NormalizationStats, image_size: int | None = None) -> np.ndarray:
    """Stack images into an (N, C, H, W) float32 batch ready for the image encoder.

    Chain: band selection, optional bicubic resize, reflectance / 10000, per-band
    standardisation with ``stats`` (which must be expressed in the /10000 scale).
    """
    mean, std = stats.arrays(bands)
    out = []
    for im in images:
        im = select_bands(im, bands)
        if image_size is not None and (im.height != image_size or im.width != image_size):
            im = resize_bicubic(im, image_size, image_size)
        v = im.values.astype(np.float64) / REFLECTANCE_SCALE
        out.append((v - mean[:, None, None]) / std[:, None, None])
    return np.stack(out).astype(np.float32)


# ---------------------------------------------------------------------------
# scene records and the synthetic generator


@dataclass
class SceneRecord:
    id: str
    image: MultispectralImage | Path
    caption: str
    class_labels: list[str]
    split: str
    qa_pairs: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.caption:
            raise ValueError(f"record {self.id}: caption must be non-empty")
        if not self.class_labels:
            raise ValueError(f"record {self.id}: class_labels must be non-empty")
        if self.split not in SPLITS:
            raise ValueError(f"record {self.id}: split must be one of {SPLITS}, got {self.split!r}")

    def load_image(self) -> MultispectralImage:
        if isinstance(self.image, MultispectralImage):
            return self.image
        return read_msr1(self.image)


DEFAULT_CLASS_NAMES = (
    "forest", "river", "residential area", "industrial area", "annual crop", "pasture",
    "sea", "highway", "herbaceous vegetation", "permanent crop", "wetland", "bare soil",
    "snow", "lake", "airport", "meadow",
)

DEFAULT_CAPTION_TEMPLATES = (
    "a satellite image of {}",
    "a satellite photo of {} seen from above",
    "an aerial view showing {}",
    "this scene is dominated by {}",
    "{} covers most of the image",
    "a remote sensing image of {} in the region",
)

_CAPTION_QUALIFIERS = ("", " with some visible texture", " under a clear sky", " in the summer")


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_classes: int = 4
    per_class_count: Mapping[str, int] = field(
        default_factory=lambda: {"train": 20, "val": 5, "test": 10})
    image_size: int = 32
    band_set: tuple[Band, ...] = DEFAULT_10_BANDS
    spectral_only_classes: tuple[int, ...] = ()
    noise_std: float = 50.0
    texture_amplitude: float = 0.15
    class_names: tuple[str, ...] | None = None
    caption_templates: tuple[tuple[str, ...], ...] | None = None

    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        return DEFAULT_CLASS_NAMES[: self.num_classes]

    def templates(self, k: int) -> tuple[str, ...]:
        if self.caption_templates is not None:
            return tuple(self.caption_templates[k])
        return DEFAULT_CAPTION_TEMPLATES

    def validate(self) -> None:
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.class_names is None and self.num_classes > len(DEFAULT_CLASS_NAMES):
            raise InvalidConfig(
                f"num_classes > {len(DEFAULT_CLASS_NAMES)} requires explicit class_names")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise InvalidConfig("class_names length must equal num_classes")
        if len(set(self.names())) != self.num_classes:
            raise InvalidConfig("class names must be unique")
        bands = as_bands(self.band_set)
        if not set(RGB_BANDS) <= set(bands):
            raise InvalidConfig("band_set must include B2, B3 and B4")
        bad = [k for k in self.spectral_only_classes if not 0 <= k < self.num_classes]
        if bad:
            raise InvalidConfig(f"spectral_only_classes out of range: {bad}")
        if len(self.spectral_only_classes) > 1 and len(bands) == 3:
            raise InvalidConfig("spectral_only_classes need at least one non-RGB band")
        if self.image_size < 1:
            raise InvalidConfig("image_size must be >= 1")
        if self.noise_std < 0 or not math.isfinite(self.noise_std):
            raise InvalidConfig("noise_std must be finite and >= 0")
        if not 0 <= self.texture_amplitude < 1:
            raise InvalidConfig("texture_amplitude must lie in [0, 1)")
        for split, n in self.per_class_count.items():
            if split not in SPLITS:
                raise InvalidConfig(f"unknown split {split!r}")
            if int(n) < 0:
                raise InvalidConfig(f"per_class_count[{split}] must be >= 0")
        if self.caption_templates is not None:
            if len(self.caption_templates) != self.num_classes:
                raise InvalidConfig("caption_templates needs one template list per class")
            for tl in self.caption_templates:
                if not tl or any(t.count("{}") != 1 for t in tl):
                    raise InvalidConfig("each caption template must contain '{}' exactly once")

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "num_classes": self.num_classes,
            "per_class_count": dict(self.per_class_count), "image_size": self.image_size,
            "band_set": [b.value for b in as_bands(self.band_set)],
            "spectral_only_classes": list(self.spectral_only_classes),
            "noise_std": self.noise_std, "texture_amplitude": self.texture_amplitude,
            "class_names": None if self.class_names is None else list(self.class_names),
            "caption_templates": None if self.caption_templates is None
            else [list(t) for t in self.caption_templates],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthConfig":
        obj = dict(obj)
        if "band_set" in obj:
            bs = obj["band_set"]
            obj["band_set"] = parse_band_list(str(bs)) if isinstance(bs, (str, int)) else as_bands(bs)
        if "spectral_only_classes" in obj:
            obj["spectral_only_classes"] = tuple(int(k) for k in obj["spectral_only_classes"])
        if obj.get("class_names") is not None:
            obj["class_names"] = tuple(obj["class_names"])
        if obj.get("caption_templates") is not None:
            obj["caption_templates"] = tuple(tuple(t) for t in obj["caption_templates"])
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


def _separation_band(bands: Sequence[Band]) -> Band:
    for pref in (Band.B11, Band.B12, Band.B8, Band.B8A, Band.B5, Band.B6, Band.B7):
        if pref in bands:
            return pref
    return next(b for b in bands if b not in RGB_BANDS)


def class_signatures(config: SynthConfig) -> np.ndarray:
    """(num_classes, num_bands) mean reflectance per class over ``config.band_set``.

    Spectral-only classes share one RGB triple and are separated on a ladder in
    a SWIR band (B11 when available) with spacing ``max(400, 6 * noise_std)``.
    Every other class gets an RGB triple at least ``rgb_gap`` away (L-inf) from all
    other RGB groups so it stays separable from visible bands alone.
    """
    config.validate()
    bands = as_bands(config.band_set)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5167]))
    rgb_idx = [bands.index(b) for b in RGB_BANDS]
    other_idx = [i for i in range(len(bands)) if i not in rgb_idx]
    spectral = sorted(set(config.spectral_only_classes))
    rgb_gap = max(300.0, 6.0 * config.noise_std)

    sig = rng.uniform(500.0, 4000.0, size=(config.num_classes, len(bands)))
    groups: list[list[int]] = [[k] for k in range(config.num_classes) if k not in spectral]
    if spectral:
        groups.append(spectral)
    accepted: list[np.ndarray] = []
    for group in groups:
        for _ in range(10000):
            cand = rng.uniform(300.0, 3000.0 + rgb_gap * len(groups), size=3)
            if all(np.max(np.abs(cand - a)) >= rgb_gap for a in accepted):
                break
        else:  # pragma: no cover - the range grows with the number of groups
            raise InvalidConfig("could not place separable RGB signatures")
        accepted.append(cand)
        for k in group:
            sig[k, rgb_idx] = cand
    if spectral and other_idx:
        sep = bands.index(_separation_band(bands))
        gap = max(400.0, 6.0 * config.noise_std)
        order = rng.permutation(len(spectral))
        for rank, k in zip(order, spectral):
            sig[k, sep] = 400.0 + gap * rank
    return sig


def _texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Low-frequency cosine mixture with exactly zero spatial mean, |t| <= amplitude."""
    if amplitude == 0:
        return np.zeros((size, size))
    coords = np.arange(size) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    freqs = [(fy, fx) for fy in range(3) for fx in range(3) if (fy, fx) != (0, 0)]
    pick = rng.choice(len(freqs), size=3, replace=False)
    coef = rng.dirichlet(np.ones(3))
    tex = np.zeros((size, size))
    for c, p in zip(coef, pick):
        fy, fx = freqs[p]
        phase = rng.uniform(0, 2 * np.pi)
        tex += c * np.cos(2 * np.pi * (fy * yy + fx * xx) / size + phase)
    if size <= 2:
        tex -= tex.mean()
    return amplitude * tex


def _caption(rng: np.random.Generator, name: str, templates: Sequence[str]) -> str:
    t = templates[int(rng.integers(len(templates)))]
    q = _CAPTION_QUALIFIERS[int(rng.integers(len(_CAPTION_QUALIFIERS)))]
    return t.format(name) + q


def _qa_pairs(name: str, mean_rgb: float) -> list[tuple[str, str]]:
    watery = any(w in name for w in ("river", "sea", "lake", "wetland"))
    return [
        ("What is the dominant land cover?", name),
        ("Is there any water visible?", "yes" if watery else "no"),
        ("How bright is the scene in visible light?", "bright" if mean_rgb > 1500 else "dark"),
    ]


def generate_synthetic(config: SynthConfig) -> list[SceneRecord]:
    """Deterministic synthetic scenes: signature * (1 + texture) + zero-mean noise.

    Per-band spatial means of each image equal the class signature up to float32
    rounding, unless clipping at zero kicks in for extreme noise levels.
    """
    config.validate()
    bands = as_bands(config.band_set)
    sig = class_signatures(config)
    names = config.names()
    n = config.image_size
    rgb_idx = [bands.index(b) for b in RGB_BANDS]
    records = []
    for s_idx, split in enumerate(SPLITS):
        count = int(config.per_class_count.get(split, 0))
        for i in range(count):
            # texture and noise depend on (split, i) only, so classes with equal RGB
            # signatures get bit-identical RGB planes at matching indices
            img_rng = np.random.default_rng(np.random.SeedSequence([config.seed, s_idx, i]))
            tex = _texture(img_rng, n, config.texture_amplitude)
            noise = img_rng.standard_normal((len(bands), n, n)) * config.noise_std
            noise -= noise.mean(axis=(1, 2), keepdims=True)
            for k in range(config.num_classes):
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, s_idx, k, i]))
                vals = sig[k][:, None, None] * (1.0 + tex[None]) + noise
                vals = np.maximum(vals, 0.0).astype(np.float32)
                image = MultispectralImage(bands, vals)
                records.append(SceneRecord(
                    id=f"{split}-{k:02d}-{i:05d}",
                    image=image,
                    caption=_caption(rng, names[k], config.templates(k)),
                    class_labels=[names[k]],
                    split=split,
                    qa_pairs=_qa_pairs(names[k], float(sig[k, rgb_idx].mean())),
                ))
    return records


def split_records(records: Iterable[SceneRecord], split: str) -> list[SceneRecord]:
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------------------
# MSR1 raster files and JSON-lines manifests

MSR1_MAGIC = b"MSR1"


def encode_msr1(names: Sequence[str], values: np.ndarray) -> bytes:
    values = np.asarray(values)
    # zero bands still carries one h x w plane (used for embedding matrices)
    if values.ndim != 3 or values.shape[0] != max(len(names), 1):
        raise FormatError(f"values shape {values.shape} does not match {len(names)} bands")
    if len(names) > 255:
        raise FormatError("at most 255 bands")
    parts = [MSR1_MAGIC, struct.pack("<B", len(names))]
    for nm in names:
        raw = str(nm).encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
    parts.append(struct.pack("<II", values.shape[1], values.shape[2]))
    parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_msr1(buf: bytes) -> tuple[list[str], np.ndarray]:
    try:
        return _decode_msr1(buf)
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"corrupt MSR1 data: {e}") from e


def _decode_msr1(buf: bytes) -> tuple[list[str], np.ndarray]:
    if buf[:4] != MSR1_MAGIC:
        raise FormatError("bad MSR1 magic")
    pos = 4
    (count,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    names = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        names.append(buf[pos:pos + ln].decode("ascii"))
        pos += ln
    h, w = struct.unpack_from("<II", buf, pos)
    pos += 8
    planes = max(count, 1)
    n = planes * h * w
    if len(buf) - pos != 4 * n:
        raise FormatError(f"MSR1 payload size {len(buf) - pos} != expected {4 * n}")
    vals = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32)
    return names, vals.reshape(planes, h, w)


def write_msr1(path: str | Path, image: MultispectralImage) -> None:
    Path(path).write_bytes(encode_msr1([b.value for b in image.bands], image.values))


def read_msr1(path: str | Path) -> MultispectralImage:
    names, vals = decode_msr1(Path(path).read_bytes())
    return MultispectralImage(as_bands(names), vals)


def record_to_json(rec: SceneRecord, image_path: str) -> dict:
    return {"id": rec.id, "image_path": image_path, "caption": rec.caption,
            "qa_pairs": [list(p) for p in rec.qa_pairs], "class_labels": list(rec.class_labels),
            "split": rec.split}


def write_dataset(records: Sequence[SceneRecord], out_dir: str | Path) -> Path:
    """Write ``images/<id>.msr`` rasters and ``manifest.jsonl``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"images/{rec.id}.msr"
        write_msr1(out / rel, rec.load_image())
        lines.append(json.dumps(record_to_json(rec, rel), sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> list[SceneRecord]:
    path = Path(path)
    base = path.parent
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(SceneRecord(
                    id=obj["id"], image=base / obj["image_path"], caption=obj["caption"],
                    class_labels=list(obj["class_labels"]), split=obj["split"],
                    qa_pairs=[tuple(p) for p in obj.get("qa_pairs") or []],
                ))
            except (KeyError, ValueError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    return records
