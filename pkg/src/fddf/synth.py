"""Procedural stand-in for a real recapture corpus.

Clean images are smooth gradients with soft-edged shapes and low-amplitude
value noise. Each recapture pattern is a separate, seeded image operator:

* moiré     two-grating multiplicative luminance interference
* edge      dark device-bezel bands with a hard boundary
* artifact  elliptical specular blobs with Gaussian falloff
* other     a mouse-cursor glyph or a rounded finger-like occluder

Everything is a pure function of integer seeds.
"""

from __future__ import annotations

import enum
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from fddf.disentangle import RgbImage, detail_energy, highlight_fraction, log_response, to_grayscale
from fddf.errors import ConfigurationError, ImageError, ParseError
from fddf.imageio import load_image, write_ppm

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.tsv"
DEFAULT_SIZE = (64, 64)


class PatternKind(str, enum.Enum):
    MOIRE = "moire"
    EDGE = "edge"
    ARTIFACT = "artifact"
    OTHER = "other"

    @classmethod
    def parse(cls, value: "str | PatternKind") -> "PatternKind":
        try:
            return cls(value.lower() if isinstance(value, str) else value)
        except ValueError:
            raise ConfigurationError(f"unknown pattern {value!r}; choose from {[p.value for p in cls]}") from None


PATTERNS = tuple(PatternKind)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any sequence of ints/strings."""
    h = hashlib.blake2b(repr(tuple(parts)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _check_size(size) -> tuple[int, int]:
    w, h = (int(s) for s in size)
    if w < 32 or h < 32 or w % 2 or h % 2:
        raise ImageError(f"sample size must be even and at least 32x32, got {w}x{h}")
    return w, h


def _to_rgb(arr: np.ndarray) -> RgbImage:
    return RgbImage(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


# -- clean images -------------------------------------------------------------


def _shape_alpha(rng, xx, yy, w, h) -> np.ndarray:
    cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
    hw, hh = rng.uniform(0.08, 0.3) * w, rng.uniform(0.08, 0.3) * h
    softness = rng.uniform(1.5, 3.0)
    angle = rng.uniform(0, math.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    if rng.random() < 0.5:
        qx, qy = np.abs(u) - hw, np.abs(v) - hh
        dist = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0)
    else:
        dist = (np.sqrt((u / hw) ** 2 + (v / hh) ** 2) - 1.0) * min(hw, hh)
    return 1.0 / (1.0 + np.exp(dist / softness))


def gen_base_image(seed: int, size=DEFAULT_SIZE) -> RgbImage:
    """Clean image whose pixels all lie in a convex colour range of [62, 188].

    The range keeps mean luma inside [60, 180] and luma below the 200
    specular threshold everywhere.
    """
    w, h = _check_size(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    c0, c1 = rng.uniform(70, 180, size=(2, 3))
    theta = rng.uniform(0, 2 * math.pi)
    t = xx * math.cos(theta) + yy * math.sin(theta)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 + (c1 - c0) * t[..., None]

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(70, 180, size=3)
        alpha = rng.uniform(0.6, 1.0) * _shape_alpha(rng, xx, yy, w, h)
        img = img * (1 - alpha[..., None]) + color * alpha[..., None]

    grid = rng.normal(0.0, 2.5, size=(h // 12 + 2, w // 12 + 2))
    noise = ndimage.zoom(grid, (h / grid.shape[0], w / grid.shape[1]), order=3, mode="nearest")[:h, :w]
    img = img + np.clip(noise, -8, 8)[..., None]
    return _to_rgb(img)


# -- recapture patterns -------------------------------------------------------


def apply_moire(img: RgbImage, seed: int, amplitude: float | None = None) -> RgbImage:
    """Multiply luminance by ``1 + a sin(2 pi f u) sin(2 pi f v)``.

    ``u`` and ``v`` run across two gratings whose orientations differ by
    2-10 degrees; ``f`` is in cycles/pixel.
    """
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.08, 0.25)
    f = rng.uniform(0.15, 0.45)
    rel = math.radians(rng.uniform(2.0, 10.0))
    base = rng.uniform(0, math.pi)
    p1, p2 = rng.uniform(0, 2 * math.pi, size=2)
    if amplitude is not None:
        a = amplitude
    if a == 0:
        return RgbImage(img.pixels.copy())
    h, w = img.height, img.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx * math.cos(base) + yy * math.sin(base)
    v = xx * math.cos(base + rel) + yy * math.sin(base + rel)
    factor = 1.0 + a * np.sin(2 * math.pi * f * u + p1) * np.sin(2 * math.pi * f * v + p2)
    return _to_rgb(img.pixels * factor[..., None])


def apply_edge(img: RgbImage, seed: int, width_frac: float | None = None) -> RgbImage:
    """Paint 1-2 near-black bezel bands (luma <= 30) with a hard boundary."""
    rng = np.random.default_rng(seed)
    n_sides = int(rng.integers(1, 3))
    sides = rng.choice(4, size=n_sides, replace=False)
    fracs = rng.uniform(0.04, 0.12, size=n_sides)
    color = rng.uniform(0, 20, size=3)
    if width_frac is not None:
        fracs = np.full(n_sides, float(width_frac))
    px = img.pixels.copy()
    h, w = img.height, img.width
    for side, frac in zip(sides, fracs):
        dim = h if side in (0, 1) else w
        band = int(round(frac * dim))
        if frac > 0:
            band = max(1, band)
        if band == 0:
            continue
        if side == 0:
            px[:band] = np.rint(color)
        elif side == 1:
            px[h - band :] = np.rint(color)
        elif side == 2:
            px[:, :band] = np.rint(color)
        else:
            px[:, w - band :] = np.rint(color)
    return RgbImage(px)


_HALF_RADIUS = math.sqrt(2 * math.log(4.0))


def apply_artifact(img: RgbImage, seed: int, n_blobs: int | None = None) -> RgbImage:
    """Composite 1-3 white elliptical highlights covering 0.5-4% in total."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 4))
    total = rng.uniform(0.005, 0.04)
    shares = rng.uniform(0.7, 1.3, size=3)
    aspects = rng.uniform(0.5, 2.0, size=3)
    angles = rng.uniform(0, math.pi, size=3)
    centers = rng.random(size=(3, 2))
    if n_blobs is not None:
        count = int(n_blobs)
    if count == 0:
        return RgbImage(img.pixels.copy())
    h, w = img.height, img.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    shares = shares[:count] / shares[:count].sum()
    out = img.pixels.astype(np.float64)
    for i in range(count):
        area = total * shares[i] * w * h
        # blob area is the alpha >= 0.5 footprint: 2 exp(-d^2 / 2) = 0.5 at d = _HALF_RADIUS
        a = math.sqrt(area / (math.pi * aspects[i])) / _HALF_RADIUS
        b = a * aspects[i]
        reach = _HALF_RADIUS * max(a, b) + 1
        # snap to a pixel centre so the plateau always covers at least one pixel
        cx = math.floor(reach + centers[i, 0] * max(w - 2 * reach, 1)) + 0.5
        cy = math.floor(reach + centers[i, 1] * max(h - 2 * reach, 1)) + 0.5
        dx, dy = xx - cx, yy - cy
        u = dx * math.cos(angles[i]) + dy * math.sin(angles[i])
        v = -dx * math.sin(angles[i]) + dy * math.cos(angles[i])
        alpha = np.clip(2.0 * np.exp(-0.5 * ((u / a) ** 2 + (v / b) ** 2)), 0, 1)[..., None]
        out = out * (1 - alpha) + 255.0 * alpha
    return _to_rgb(out)


# 11x17 arrow: B = black outline, W = white fill, . = transparent
_CURSOR = (
    "B..........",
    "BB.........",
    "BWB........",
    "BWWB.......",
    "BWWWB......",
    "BWWWWB.....",
    "BWWWWWB....",
    "BWWWWWWB...",
    "BWWWWWWWB..",
    "BWWWWWWWWB.",
    "BWWWWWWWWWB",
    "BWWWWWWBBBB",
    "BWWWBWWB...",
    "BWWB.BWWB..",
    "BWB..BWWB..",
    "BB....BWWB.",
    "B.....BBBB.",
)
CURSOR_ALPHA = np.array([[c != "." for c in row] for row in _CURSOR])
CURSOR_VALUE = np.array([[255 if c == "W" else 0 for c in row] for row in _CURSOR], dtype=np.float64)


def apply_other(img: RgbImage, seed: int, alpha: float | None = None) -> RgbImage:
    """Stamp a cursor glyph (scale 1-2x) or a rounded occluder on a border."""
    rng = np.random.default_rng(seed)
    use_cursor = rng.random() < 0.6
    scale = rng.uniform(1.0, 2.0)
    pos = rng.random(size=2)
    side = int(rng.integers(0, 4))
    semi = rng.uniform(7, 14, size=2)
    along = rng.uniform(0.2, 0.8)
    skin = rng.uniform([170, 120, 95], [225, 175, 145])
    opacity = 1.0 if alpha is None else float(alpha)
    if opacity == 0:
        return RgbImage(img.pixels.copy())
    h, w = img.height, img.width
    out = img.pixels.astype(np.float64)

    if use_cursor:
        gh, gw = int(round(CURSOR_ALPHA.shape[0] * scale)), int(round(CURSOR_ALPHA.shape[1] * scale))
        rows = np.minimum((np.arange(gh) / scale).astype(int), CURSOR_ALPHA.shape[0] - 1)
        cols = np.minimum((np.arange(gw) / scale).astype(int), CURSOR_ALPHA.shape[1] - 1)
        mask = CURSOR_ALPHA[np.ix_(rows, cols)] * opacity
        value = CURSOR_VALUE[np.ix_(rows, cols)]
        top = int(pos[1] * (h - gh))
        left = int(pos[0] * (w - gw))
        region = out[top : top + gh, left : left + gw]
        region[...] = region * (1 - mask[..., None]) + value[..., None] * mask[..., None]
        return _to_rgb(out)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    ax, ay = semi * min(w, h) / 64.0
    if side in (0, 1):
        cx, cy = along * w, 0.0 if side == 0 else float(h)
    else:
        cx, cy = 0.0 if side == 2 else float(w), along * h
    r = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    dist_px = (r - 1.0) * min(ax, ay)
    mask = np.clip(0.5 - dist_px, 0, 1) * opacity
    shade = 1.0 - 0.15 * np.clip(r, 0, 1)
    color = skin * shade[..., None]
    out = out * (1 - mask[..., None]) + color * mask[..., None]
    return _to_rgb(out)


APPLY = {
    PatternKind.MOIRE: apply_moire,
    PatternKind.EDGE: apply_edge,
    PatternKind.ARTIFACT: apply_artifact,
    PatternKind.OTHER: apply_other,
}


def pattern_statistic(kind: PatternKind, img: RgbImage, reference: RgbImage | None = None) -> float:
    """Scalar that responds to one pattern.

    Moiré: Haar detail energy of luma. Edge: peak |Laplacian of Gaussian|.
    Artifact: highlight fraction (Y >= 200). Other: count of pixels that
    differ from ``reference``.
    """
    kind = PatternKind.parse(kind)
    if kind is PatternKind.MOIRE:
        return detail_energy(to_grayscale(img))
    if kind is PatternKind.EDGE:
        return float(np.abs(log_response(to_grayscale(img))).max())
    if kind is PatternKind.ARTIFACT:
        return highlight_fraction(img)
    if reference is None:
        raise ConfigurationError("the 'other' statistic needs a reference image")
    return float(np.any(img.pixels != reference.pixels, axis=2).sum())


# -- samples and datasets -----------------------------------------------------


@dataclass(frozen=True)
class SampleSpec:
    seed: int
    label: str
    patterns: tuple[PatternKind, ...] = ()
    size: tuple[int, int] = DEFAULT_SIZE

    def __post_init__(self):
        if self.label not in ("original", "recaptured"):
            raise ConfigurationError(f"label must be 'original' or 'recaptured', got {self.label!r}")
        patterns = tuple(p for p in PATTERNS if p in {PatternKind.parse(q) for q in self.patterns})
        object.__setattr__(self, "patterns", patterns)
        if (self.label == "recaptured") != bool(patterns):
            raise ConfigurationError("recaptured samples need at least one pattern; originals need none")
        object.__setattr__(self, "size", _check_size(self.size))


def generate_sample(spec: SampleSpec) -> RgbImage:
    img = gen_base_image(spec.seed, spec.size)
    for p in spec.patterns:
        img = APPLY[p](img, derive_seed(spec.seed, p.value))
    return img


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    patterns: tuple[PatternKind, ...]
    seed: int

    @property
    def target(self) -> int:
        return int(self.label == "recaptured")


@dataclass
class DatasetManifest:
    """Ordered, labeled listing of sample files relative to ``root``."""

    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)
    version: int = MANIFEST_VERSION

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, DatasetManifest) and (self.version, self.entries) == (other.version, other.entries)

    def counts(self) -> dict[str, int]:
        rec = sum(e.target for e in self.entries)
        return {"samples": len(self.entries), "original": len(self.entries) - rec, "recaptured": rec}

    def pattern_counts(self) -> dict[PatternKind, int]:
        return {p: sum(p in e.patterns for e in self.entries) for p in PATTERNS}

    def labels(self) -> np.ndarray:
        return np.array([e.target for e in self.entries], dtype=np.int64)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_images(self) -> list[RgbImage]:
        return [load_image(self.image_path(e)) for e in self.entries]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest([self.entries[i] for i in indices], self.root, self.version)

    def to_text(self) -> str:
        c = self.counts()
        lines = [
            f"#fddf-manifest version={self.version} samples={c['samples']} "
            f"original={c['original']} recaptured={c['recaptured']}"
        ]
        for e in self.entries:
            pats = ",".join(p.value for p in e.patterns) or "-"
            lines.append(f"{e.path}\t{e.label}\t{pats}\t{e.seed}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def from_text(cls, text: str, root: Path) -> "DatasetManifest":
        lines = text.split("\n")
        header = lines[0]
        if not header.startswith("#fddf-manifest "):
            raise ParseError("missing '#fddf-manifest' header", 0)
        try:
            meta = dict(kv.split("=", 1) for kv in header.split()[1:])
            version = int(meta["version"])
            declared = {k: int(meta[k]) for k in ("samples", "original", "recaptured")}
        except (KeyError, ValueError) as exc:
            raise ParseError(f"malformed manifest header {header!r}", 0) from exc
        if version != MANIFEST_VERSION:
            raise ParseError(f"unsupported manifest version {version}", 0)
        entries = []
        offset = len(header) + 1
        for line in lines[1:]:
            if line:
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", offset)
                path, label, pats, seed = parts
                try:
                    patterns = () if pats == "-" else tuple(PatternKind.parse(p) for p in pats.split(","))
                    entries.append(ManifestEntry(path, label, patterns, int(seed)))
                except (ConfigurationError, ValueError) as exc:
                    raise ParseError(f"bad manifest record {line!r}: {exc}", offset) from exc
                if label not in ("original", "recaptured") or (label == "recaptured") != bool(patterns):
                    raise ParseError(f"inconsistent label/patterns in {line!r}", offset)
            offset += len(line) + 1
        manifest = cls(entries, root, version)
        if manifest.counts() != declared:
            raise ParseError(f"header counts {declared} disagree with records {manifest.counts()}", 0)
        if len({e.path for e in entries}) != len(entries):
            raise ParseError("duplicate sample paths in manifest", 0)
        return manifest

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> "DatasetManifest":
        """Read a manifest file, or ``<dir>/manifest.tsv`` when given a directory."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        manifest = cls.from_text(path.read_text(encoding="utf-8"), path.parent)
        if check_files:
            missing = [e.path for e in manifest.entries if not manifest.image_path(e).is_file()]
            if missing:
                raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
        return manifest


def parse_mix(mix) -> dict[PatternKind, float]:
    """Accept a mapping, four numbers, or ``"moire=0.4,edge=0.2,..."``."""
    if mix is None:
        return {p: 0.25 for p in PATTERNS}
    if isinstance(mix, str):
        items = [s.strip() for s in mix.split(",") if s.strip()]
        if all("=" in s for s in items):
            mix = {k.strip(): float(v) for k, v in (s.split("=", 1) for s in items)}
        else:
            mix = [float(s) for s in items]
    if isinstance(mix, Mapping):
        out = {p: 0.0 for p in PATTERNS}
        for k, v in mix.items():
            out[PatternKind.parse(k)] = float(v)
    else:
        values = list(mix)
        if len(values) != len(PATTERNS):
            raise ConfigurationError(f"pattern mix needs {len(PATTERNS)} fractions, got {len(values)}")
        out = dict(zip(PATTERNS, map(float, values)))
    if min(out.values()) < 0 or abs(sum(out.values()) - 1.0) > 1e-6:
        raise ConfigurationError(f"pattern mix must be non-negative and sum to 1, got {out}")
    return out


def _quota(mix: Mapping[PatternKind, float], n: int) -> list[PatternKind]:
    """Largest-remainder allocation of ``n`` draws to the mix."""
    raw = {p: mix[p] * n for p in PATTERNS}
    counts = {p: int(math.floor(raw[p])) for p in PATTERNS}
    leftover = n - sum(counts.values())
    for p in sorted(PATTERNS, key=lambda p: (counts[p] - raw[p], PATTERNS.index(p)))[:leftover]:
        counts[p] += 1
    return [p for p in PATTERNS for _ in range(counts[p])]


def plan_dataset(
    n_samples: int,
    pattern_mix=None,
    multi_pattern_rate: float = 0.0,
    seed: int = 0,
    size=DEFAULT_SIZE,
) -> list[SampleSpec]:
    """Sample specs for a 50/50 corpus: even indices clean, odd recaptured."""
    if n_samples <= 0 or n_samples % 2:
        raise ConfigurationError(f"n_samples must be positive and even, got {n_samples}")
    if not 0.0 <= multi_pattern_rate <= 1.0:
        raise ConfigurationError(f"multi_pattern_rate must lie in [0, 1], got {multi_pattern_rate}")
    mix = parse_mix(pattern_mix)
    size = _check_size(size)
    primaries = _quota(mix, n_samples // 2)
    np.random.default_rng(derive_seed(seed, "patterns")).shuffle(primaries)

    specs = []
    for i in range(n_samples):
        s = derive_seed(seed, i)
        if i % 2 == 0:
            specs.append(SampleSpec(s, "original", (), size))
            continue
        first = primaries[i // 2]
        patterns = [first]
        rng = np.random.default_rng(derive_seed(s, "second"))
        if rng.random() < multi_pattern_rate:
            others = [p for p in PATTERNS if p is not first]
            weights = np.array([mix[p] for p in others])
            weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(others), 1 / len(others))
            patterns.append(others[int(rng.choice(len(others), p=weights))])
        specs.append(SampleSpec(s, "recaptured", tuple(patterns), size))
    return specs


def build_dataset(
    n_samples: int,
    out_dir: str | os.PathLike,
    pattern_mix=None,
    multi_pattern_rate: float = 0.0,
    seed: int = 0,
    size=DEFAULT_SIZE,
) -> DatasetManifest:
    """Write ``images/NNNNN.ppm`` plus ``manifest.tsv`` under ``out_dir``."""
    specs = plan_dataset(n_samples, pattern_mix, multi_pattern_rate, seed, size)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        rel = f"images/{i:05d}.ppm"
        write_ppm(out / rel, generate_sample(spec))
        entries.append(ManifestEntry(rel, spec.label, spec.patterns, spec.seed))
    manifest = DatasetManifest(entries, out)
    manifest.write(out / MANIFEST_NAME)
    return manifest
