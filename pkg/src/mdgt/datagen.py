"""Procedural multi-domain labeled image datasets.

Classes are parametric glyphs rendered from analytic signed-distance
functions with 2x supersampling, so the label-bearing signal is pure
geometry. A domain style re-skins the rendering (palette, stroke,
background texture, inversion, blur) without touching that geometry,
which gives controllable, label-preserving domain shift. All sampling
runs on a counter-based Philox stream keyed by the dataset seed, making
regeneration bit-exact on any platform.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import seeding, tensorio

SUPPORTED_CHANNELS = (1, 3)
SUPPORTED_SIZES = (16, 32, 64)
STROKES = ("filled", "outline", "sketch")

GLYPH_NAMES = (
    "circle", "square", "triangle", "cross", "star", "ring", "bar",
    "diamond", "hexagon", "x_cross", "ellipse", "crescent", "half_disk",
    "double_bar", "pentagon", "t_shape",
)
MAX_CLASSES = len(GLYPH_NAMES)


@dataclass(frozen=True)
class ImageSpec:
    channels: int = 3
    size: int = 32

    def __post_init__(self):
        if self.channels not in SUPPORTED_CHANNELS:
            raise ValueError(f"unsupported channel count {self.channels}")
        if self.size not in SUPPORTED_SIZES:
            raise ValueError(f"unsupported image size {self.size}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.size, self.size)


@dataclass(frozen=True)
class Palette:
    """Per-sample color generators: base color plus uniform jitter."""
    fg: tuple[float, float, float]
    bg: tuple[float, float, float]
    fg_jitter: float = 0.0
    bg_jitter: float = 0.0
    grayscale: bool = False


@dataclass(frozen=True)
class DomainStyle:
    name: str
    palette: Palette
    stroke: str = "filled"
    texture_noise: float = 0.0
    invert: bool = False
    blur_radius: int = 0

    def __post_init__(self):
        if self.stroke not in STROKES:
            raise ValueError(f"unknown stroke {self.stroke!r}")
        if not 0.0 <= self.texture_noise <= 1.0:
            raise ValueError("texture_noise must be in [0, 1]")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be non-negative")

    def to_json(self) -> dict:
        return {"name": self.name, "stroke": self.stroke,
                "texture_noise": self.texture_noise, "invert": self.invert,
                "blur_radius": self.blur_radius,
                "palette": {"fg": list(self.palette.fg), "bg": list(self.palette.bg),
                            "fg_jitter": self.palette.fg_jitter,
                            "bg_jitter": self.palette.bg_jitter,
                            "grayscale": self.palette.grayscale}}

    @classmethod
    def from_json(cls, obj: dict) -> "DomainStyle":
        p = obj["palette"]
        return cls(name=obj["name"],
                   palette=Palette(fg=tuple(p["fg"]), bg=tuple(p["bg"]),
                                   fg_jitter=p["fg_jitter"], bg_jitter=p["bg_jitter"],
                                   grayscale=p["grayscale"]),
                   stroke=obj["stroke"], texture_noise=obj["texture_noise"],
                   invert=obj["invert"], blur_radius=obj["blur_radius"])


@dataclass(frozen=True)
class Provenance:
    """Audit trail: which real domains a dataset's pixels derive from."""
    kind: str                      # "real" | "synthetic"
    style_domain: str              # distribution the images represent
    origins: tuple[str, ...]       # real domains the pixels came from
    checkpoint_id: str | None = None

    def to_json(self) -> dict:
        return {"kind": self.kind, "style_domain": self.style_domain,
                "origins": list(self.origins), "checkpoint_id": self.checkpoint_id}

    @classmethod
    def from_json(cls, obj: dict) -> "Provenance":
        return cls(kind=obj["kind"], style_domain=obj["style_domain"],
                   origins=tuple(obj["origins"]), checkpoint_id=obj.get("checkpoint_id"))


@dataclass
class DomainDataset:
    """Labeled samples from one named domain, images in [-1, 1]."""
    domain: str
    images: np.ndarray             # (n, c, h, w) float64
    labels: np.ndarray             # (n,) int64
    seed: int
    provenance: Provenance

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, idx: np.ndarray, domain: str | None = None) -> "DomainDataset":
        return DomainDataset(domain or self.domain, self.images[idx],
                             self.labels[idx], self.seed, self.provenance)


@dataclass
class DomainSplit:
    """One suite domain with its fixed train/test partition."""
    domain: str
    train: DomainDataset
    test: DomainDataset


# ---------------------------------------------------------------------------
# signed-distance glyphs (negative inside)

def _sd_circle(px, py, r):
    return np.hypot(px, py) - r


def _sd_box(px, py, hx, hy):
    qx = np.abs(px) - hx
    qy = np.abs(py) - hy
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside


def _sd_ngon(px, py, r, n, rot=0.0):
    ang = np.arctan2(py, px) + rot
    rad = np.hypot(px, py)
    sector = np.pi / n
    a = np.mod(ang, 2.0 * sector) - sector
    return rad * np.cos(a) - r * np.cos(sector)


def _rot45(px, py):
    c = np.sqrt(0.5)
    return c * (px + py), c * (py - px)


_R = 0.62  # nominal glyph radius in the [-1, 1] frame


def _glyph_sdf(index: int, px, py):
    r = _R
    name = GLYPH_NAMES[index]
    if name == "circle":
        return _sd_circle(px, py, r)
    if name == "square":
        return _sd_box(px, py, 0.88 * r, 0.88 * r)
    if name == "triangle":
        return _sd_ngon(px, py, 1.35 * r, 3, rot=np.pi / 2)
    if name == "cross":
        return np.minimum(_sd_box(px, py, 1.1 * r, 0.36 * r),
                          _sd_box(px, py, 0.36 * r, 1.1 * r))
    if name == "star":
        ang = np.arctan2(py, px)
        spike = 0.5 * (np.cos(5.0 * ang) + 1.0)
        return np.hypot(px, py) - 1.15 * r * (0.38 + 0.62 * spike)
    if name == "ring":
        return np.abs(_sd_circle(px, py, 0.8 * r)) - 0.2 * r
    if name == "bar":
        return _sd_box(px, py, 1.1 * r, 0.28 * r)
    if name == "diamond":
        qx, qy = _rot45(px, py)
        return _sd_box(qx, qy, 0.78 * r, 0.78 * r)
    if name == "hexagon":
        return _sd_ngon(px, py, r, 6)
    if name == "x_cross":
        qx, qy = _rot45(px, py)
        return np.minimum(_sd_box(qx, qy, r, 0.3 * r), _sd_box(qx, qy, 0.3 * r, r))
    if name == "ellipse":
        return np.hypot(px, py / 0.5) - r
    if name == "crescent":
        return np.maximum(_sd_circle(px, py, r), -_sd_circle(px - 0.45 * r, py, 0.85 * r))
    if name == "half_disk":
        return np.maximum(_sd_circle(px, py, r), py)
    if name == "double_bar":
        return np.minimum(_sd_box(px, py - 0.5 * r, r, 0.2 * r),
                          _sd_box(px, py + 0.5 * r, r, 0.2 * r))
    if name == "pentagon":
        return _sd_ngon(px, py, r, 5, rot=np.pi / 2)
    if name == "t_shape":
        return np.minimum(_sd_box(px, py + 0.62 * r, r, 0.24 * r),
                          _sd_box(px, py - 0.15 * r, 0.24 * r, 0.62 * r))
    raise ValueError(f"no glyph with index {index}")


# ---------------------------------------------------------------------------
# rendering

def _sample_color(palette: Palette, base, jitter, rng) -> np.ndarray:
    color = np.clip(np.asarray(base) + rng.uniform(-jitter, jitter, size=3), 0.0, 1.0)
    if palette.grayscale:
        color[:] = color.mean()
    return color


def _render_sample(cls: int, style: DomainStyle, spec: ImageSpec, rng) -> np.ndarray:
    size = spec.size
    ss = 2 * size
    ticks = (np.arange(ss) + 0.5) / ss * 2.0 - 1.0
    px, py = np.meshgrid(ticks, ticks)

    # jitter: position +-10% of the frame, scale +-15%, rotation +-15 deg
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    scale = rng.uniform(0.85, 1.15)
    theta = rng.uniform(-np.pi / 12.0, np.pi / 12.0)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    tx = (cos_t * (px - cx) + sin_t * (py - cy)) / scale
    ty = (-sin_t * (px - cx) + cos_t * (py - cy)) / scale

    sdf = _glyph_sdf(cls, tx, ty)
    width = 2.2 / size
    if style.stroke == "filled":
        hit = sdf <= 0.0
    elif style.stroke == "outline":
        hit = np.abs(sdf) <= width
    else:  # sketch: broken outline
        hit = np.abs(sdf) <= 1.3 * width
        hit &= rng.random(size=(ss, ss)) > 0.32
    alpha = hit.reshape(size, 2, size, 2).mean(axis=(1, 3))

    fg = _sample_color(style.palette, style.palette.fg, style.palette.fg_jitter, rng)
    bg = _sample_color(style.palette, style.palette.bg, style.palette.bg_jitter, rng)
    if spec.channels == 1:
        fg, bg = fg[:1], bg[:1]
    img = alpha[None] * fg[:, None, None] + (1.0 - alpha[None]) * bg[:, None, None]

    if style.texture_noise > 0.0:
        grain = rng.uniform(-1.0, 1.0, size=(size, size))
        img = img + (1.0 - alpha[None]) * (0.35 * style.texture_noise) * grain[None]
    if style.blur_radius > 0:
        k = 2 * style.blur_radius + 1
        img = ndimage.uniform_filter(img, size=(1, k, k), mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    if style.invert:
        img = 1.0 - img
    return img * 2.0 - 1.0


def generate_domain(style: DomainStyle, num_classes: int, n_per_class: int,
                    image_spec: ImageSpec, seed: int) -> DomainDataset:
    """Render a labeled domain: class-major order, n_per_class each."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_CLASSES}]")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = seeding.stream(seed, seeding.DATA_JITTER)
    images = np.empty((num_classes * n_per_class,) + image_spec.shape)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    i = 0
    for cls in range(num_classes):
        for _ in range(n_per_class):
            images[i] = _render_sample(cls, style, image_spec, rng)
            labels[i] = cls
            i += 1
    return DomainDataset(style.name, images, labels, seed,
                         Provenance("real", style.name, (style.name,)))


# ---------------------------------------------------------------------------
# the standard 4-domain suite

STANDARD_STYLES = (
    DomainStyle("photo",
                Palette(fg=(0.78, 0.3, 0.25), bg=(0.16, 0.22, 0.32),
                        fg_jitter=0.2, bg_jitter=0.1),
                stroke="filled", texture_noise=0.35, blur_radius=1),
    DomainStyle("clipart",
                Palette(fg=(0.95, 0.62, 0.1), bg=(0.88, 0.91, 0.96),
                        fg_jitter=0.28, bg_jitter=0.05),
                stroke="filled"),
    DomainStyle("sketch",
                Palette(fg=(0.12, 0.12, 0.12), bg=(0.96, 0.96, 0.96),
                        fg_jitter=0.1, bg_jitter=0.03, grayscale=True),
                stroke="sketch", texture_noise=0.06),
    DomainStyle("inverted-noisy",
                Palette(fg=(0.82, 0.35, 0.55), bg=(0.25, 0.3, 0.22),
                        fg_jitter=0.2, bg_jitter=0.1),
                stroke="filled", texture_noise=0.35, invert=True),
)

SUITE_CLASSES = 7
SUITE_TRAIN_PER_CLASS = 60
SUITE_TEST_PER_CLASS = 20


def split_train_test(dataset: DomainDataset, train_per_class: int,
                     test_per_class: int) -> DomainSplit:
    """Deterministic positional split within each class block."""
    train_idx, test_idx = [], []
    for cls in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) != train_per_class + test_per_class:
            raise ValueError(f"class {cls} has {len(members)} samples, expected "
                             f"{train_per_class + test_per_class}")
        train_idx.extend(members[:train_per_class])
        test_idx.extend(members[train_per_class:])
    return DomainSplit(dataset.domain,
                       dataset.subset(np.asarray(train_idx)),
                       dataset.subset(np.asarray(test_idx)))


def standard_suite(seed: int, image_spec: ImageSpec | None = None,
                   train_per_class: int = SUITE_TRAIN_PER_CLASS,
                   test_per_class: int = SUITE_TEST_PER_CLASS) -> list[DomainSplit]:
    """Four fixed styles, K=7 glyph classes, train/test split per domain."""
    spec = image_spec or ImageSpec()
    suite = []
    for i, style in enumerate(STANDARD_STYLES):
        ds = generate_domain(style, SUITE_CLASSES, train_per_class + test_per_class,
                             spec, seeding.child_seed(seed, i))
        suite.append(split_train_test(ds, train_per_class, test_per_class))
    return suite


# ---------------------------------------------------------------------------
# on-disk layout: manifest.json + images.mdgt + labels.mdgt per domain

def save_dataset_dir(directory: str | Path, split: DomainSplit,
                     style: DomainStyle | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.concatenate([split.train.images, split.test.images])
    labels = np.concatenate([split.train.labels, split.test.labels])
    tensorio.save_tensor(directory / "images.mdgt", images)
    tensorio.save_tensor(directory / "labels.mdgt", labels.astype(np.float64))
    manifest = {
        "domain": split.domain,
        "seed": split.train.seed,
        "num_classes": int(split.train.num_classes),
        "n_train": len(split.train),
        "n_test": len(split.test),
        "image_shape": list(split.train.images.shape[1:]),
        "provenance": split.train.provenance.to_json(),
    }
    if style is not None:
        manifest["style"] = style.to_json()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset_dir(directory: str | Path) -> DomainSplit:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    images = tensorio.load_tensor(directory / "images.mdgt")
    labels = tensorio.load_tensor(directory / "labels.mdgt").astype(np.int64)
    prov = Provenance.from_json(manifest["provenance"])
    n_train = manifest["n_train"]
    seed = manifest["seed"]
    domain = manifest["domain"]
    train = DomainDataset(domain, images[:n_train], labels[:n_train], seed, prov)
    test = DomainDataset(domain, images[n_train:], labels[n_train:], seed, prov)
    return DomainSplit(domain, train, test)
