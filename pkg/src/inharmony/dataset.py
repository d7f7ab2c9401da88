"""Procedural inharmonious composites and the on-disk pair format.

Composites are made by re-coloring one or more disjoint regions of a
smooth synthetic (or user supplied) base image with a random per-channel
gain, bias and gamma. Images are stored as binary PPM (P6), masks as binary
PGM (P5, values 0/255), listed in a tab-separated manifest.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import draw

log = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "ellipse", "polygon")


class DataError(ValueError):
    """Malformed or inconsistent image/mask files."""


class RejectedPair(DataError):
    """A readable pair that the loader's filters refuse (too large or empty region)."""


class RegionPlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Netpbm


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated Netpbm header")
    return data[start:pos], pos


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    tok, pos = _read_token(data, 0)
    if tok != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {tok[:2]!r}")
    try:
        width, pos = _read_token(data, pos)
        height, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: bad header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files are supported (maxval={maxval})")
    pos += 1  # exactly one whitespace byte after maxval
    size = width * height * channels
    body = data[pos:pos + size]
    if len(body) != size:
        raise DataError(f"{path}: expected {size} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    """``[H, W, 3]`` uint8."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """``[H, W]`` uint8."""
    return _read_netpbm(path, b"P5", 1)


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] array, got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected [H, W] array, got {gray.shape}")
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def to_uint8(image_chw: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` float in [0, 1] to ``[H, W, 3]`` uint8."""
    return np.clip(np.rint(np.asarray(image_chw) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(rgb: np.ndarray) -> np.ndarray:
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# sampling specs


@dataclass(frozen=True)
class RegionSpec:
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    count: tuple[int, int] = (1, 3)
    area_fraction: tuple[float, float] = (0.02, 0.5)
    max_attempts: int = 100

    def __post_init__(self):
        if not set(self.shape_kinds) <= set(SHAPE_KINDS) or not self.shape_kinds:
            raise ValueError(f"shape kinds must be drawn from {SHAPE_KINDS}")
        lo, hi = self.count
        if not 1 <= lo <= hi <= 9:
            raise ValueError("region count must lie within 1..9")
        a, b = self.area_fraction
        if not 0 < a <= b <= 0.5:
            raise ValueError("area fraction range must lie within (0, 0.5]")


@dataclass(frozen=True)
class JitterSpec:
    gain: tuple[float, float] = (0.6, 1.4)
    bias: tuple[float, float] = (-0.2, 0.2)
    gamma: tuple[float, float] = (0.7, 1.4)
    min_shift: float = 0.03
    max_tries: int = 100


@dataclass(frozen=True)
class Jitter:
    gain: tuple[float, float, float]
    bias: tuple[float, float, float]
    gamma: float


IDENTITY_JITTER = Jitter((1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0)


def sample_jitter(rng: np.random.Generator, spec: JitterSpec) -> Jitter:
    return Jitter(tuple(rng.uniform(*spec.gain, size=3).tolist()),
                  tuple(rng.uniform(*spec.bias, size=3).tolist()),
                  float(rng.uniform(*spec.gamma)))


def apply_jitter(base: np.ndarray, jitter: Jitter) -> np.ndarray:
    """8-bit-quantized ``clamp(gain * base ** gamma + bias)`` over the whole ``[3, H, W]`` image."""
    gain = np.asarray(jitter.gain)[:, None, None]
    bias = np.asarray(jitter.bias)[:, None, None]
    out = np.clip(gain * np.power(base.astype(np.float64), jitter.gamma) + bias, 0.0, 1.0)
    return np.rint(out * 255) / 255


def region_shift(base: np.ndarray, jittered: np.ndarray, region: np.ndarray) -> float:
    """Mean absolute per-channel change inside ``region``."""
    return float(np.abs(jittered - base)[:, region].mean())


# ---------------------------------------------------------------------------
# generation


def base_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth two-color gradient with a few soft colored blobs, 8-bit quantized ``[3, size, size]``."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, 1, size=2)
        sigma = rng.uniform(0.05, 0.2)
        alpha = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2)) * rng.uniform(0.4, 0.9)
        color = rng.uniform(0.05, 0.95, size=3)
        img = img * (1 - alpha) + color[:, None, None] * alpha
    return np.rint(np.clip(img, 0, 1) * 255) / 255


def _shape_mask(rng, kind, area, h, w):
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    if kind == "rectangle":
        aspect = rng.uniform(0.5, 2.0)
        rh = max(1, int(round(np.sqrt(area * aspect))))
        rw = max(1, int(round(np.sqrt(area / aspect))))
        top, left = int(round(cy - rh / 2)), int(round(cx - rw / 2))
        mask = np.zeros((h, w), dtype=bool)
        mask[max(top, 0):max(top + rh, 0), max(left, 0):max(left + rw, 0)] = True
        return mask
    elif kind == "ellipse":
        aspect = rng.uniform(0.5, 2.0)
        r = np.sqrt(area / np.pi)
        rr, cc = draw.ellipse(cy, cx, r * np.sqrt(aspect), r / np.sqrt(aspect), shape=(h, w),
                              rotation=rng.uniform(0, np.pi))
    else:
        n = rng.integers(5, 9)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(0.6, 1.0, size=n)
        # shoelace area of the unit-scale star polygon, then rescale to the target area
        px, py = radii * np.cos(angles), radii * np.sin(angles)
        unit_area = 0.5 * abs(np.dot(px, np.roll(py, 1)) - np.dot(py, np.roll(px, 1)))
        scale = np.sqrt(area / max(unit_area, 1e-6))
        rr, cc = draw.polygon(cy + scale * py, cx + scale * px, shape=(h, w))
    mask = np.zeros((h, w), dtype=bool)
    mask[rr, cc] = True
    return mask


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def sample_regions(rng: np.random.Generator, spec: RegionSpec, h: int, w: int) -> list[np.ndarray]:
    """Pairwise disjoint (non-touching) boolean region masks with total area within the spec."""
    lo, hi = spec.area_fraction
    for _ in range(spec.max_attempts):
        count = int(rng.integers(spec.count[0], spec.count[1] + 1))
        total = rng.uniform(lo, hi)
        regions: list[np.ndarray] = []
        occupied = np.zeros((h, w), dtype=bool)
        for _ in range(count):
            for _ in range(spec.max_attempts):
                kind = spec.shape_kinds[rng.integers(len(spec.shape_kinds))]
                m = _shape_mask(rng, kind, total / count * h * w, h, w)
                if m.any() and not (m & _dilate(occupied)).any():
                    break
            else:
                break
            regions.append(m)
            occupied |= m
        if len(regions) == count and lo <= occupied.mean() <= hi:
            return regions
    raise RegionPlacementError(f"could not place disjoint regions within {spec.max_attempts} attempts")


@dataclass
class Composite:
    image: np.ndarray
    mask: np.ndarray
    jitters: list[Jitter] = field(default_factory=list)


def generate_composite(base: np.ndarray, region: RegionSpec = RegionSpec(),
                       jitter: JitterSpec = JitterSpec(), seed=0, return_params: bool = False):
    """Re-color random disjoint regions of ``base`` (``[3, H, W]`` in [0, 1]).

    Returns ``(image, mask)``: the composite as float32 ``[3, H, W]`` on the
    8-bit grid and a uint8 ``{0, 1}`` ``[H, W]`` mask. Every region's jitter
    is resampled until its mean absolute shift reaches ``jitter.min_shift``.
    With ``return_params`` a :class:`Composite` carrying the jitters is returned.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 3 or base.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] base image, got {base.shape}")
    if base.min() < 0 or base.max() > 1:
        raise ValueError("base image values must lie in [0, 1]")
    base = np.rint(base * 255) / 255
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    regions = sample_regions(rng, region, base.shape[1], base.shape[2])
    image = base.copy()
    jitters = []
    for r in regions:
        for _ in range(jitter.max_tries):
            j = sample_jitter(rng, jitter)
            out = apply_jitter(base, j)
            if region_shift(base, out, r) >= jitter.min_shift:
                break
        else:
            raise RegionPlacementError(f"no jitter reached the minimum shift {jitter.min_shift} "
                                       f"within {jitter.max_tries} draws")
        image[:, r] = out[:, r]
        jitters.append(j)
    mask = np.zeros(base.shape[1:], dtype=np.uint8)
    for r in regions:
        mask[r] = 1
    comp = Composite(image.astype(np.float32), mask, jitters)
    return comp if return_params else (comp.image, comp.mask)


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 512
    n_test: int = 128
    image_size: int = 64
    region: RegionSpec = RegionSpec()
    jitter: JitterSpec = JitterSpec()
    base_dir: str | None = None


@dataclass
class SampleManifest:
    entries: list[tuple[str, str, str]]  # (split, image_path, mask_path)
    seed: int | None = None
    root: Path = Path(".")

    def split(self, name: str) -> list[tuple[str, str]]:
        return [(self.root / i, self.root / m) for s, i, m in self.entries if s == name]

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s, _, _ in self.entries:
            out[s] = out.get(s, 0) + 1
        return out

    def write(self, path) -> None:
        lines = [f"# seed {self.seed}"] if self.seed is not None else []
        lines += ["\t".join(e) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "SampleManifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        entries, seed = [], None
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "seed":
                    seed = int(parts[1])
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in ("train", "test"):
                raise DataError(f"{path}:{lineno}: expected 'split<TAB>image<TAB>mask'")
            entries.append(tuple(parts))
        return cls(entries, seed, path.parent)


def _list_bases(base_dir, size):
    bases = []
    for p in sorted(Path(base_dir).glob("*.ppm")):
        rgb = read_ppm(p)
        h, w, _ = rgb.shape
        if h < size or w < size:
            log.warning("skipping base image %s smaller than %d", p, size)
            continue
        top, left = (h - size) // 2, (w - size) // 2
        bases.append(from_uint8(rgb[top:top + size, left:left + size]))
    if not bases:
        raise DataError(f"no usable .ppm base images in {base_dir}")
    return bases


def sample_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def make_sample(cfg: DatasetConfig, seed: int, index: int, bases=None) -> Composite:
    rng = sample_seed(seed, index)
    if bases:
        base = bases[int(rng.integers(len(bases)))]
    else:
        base = base_texture(rng, cfg.image_size)
    return generate_composite(base, cfg.region, cfg.jitter, rng, return_params=True)


def build_dataset(out_dir, cfg: DatasetConfig = DatasetConfig(), seed: int = 0) -> SampleManifest:
    """Write ``n_train + n_test`` composites and ``manifest.tsv`` under ``out_dir``.

    Sample ``i`` (train first, then test) depends only on ``(seed, i)``.
    The jitter drawn for every region is listed in ``jitter.tsv``.
    """
    out = Path(out_dir)
    bases = _list_bases(cfg.base_dir, cfg.image_size) if cfg.base_dir else None
    entries, jitter_rows = [], []
    for split, n, offset in (("train", cfg.n_train, 0), ("test", cfg.n_test, cfg.n_train)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for k in range(n):
            comp = make_sample(cfg, seed, offset + k, bases)
            img_rel = f"{split}/{k:05d}.ppm"
            mask_rel = f"{split}/{k:05d}_mask.pgm"
            write_ppm(out / img_rel, to_uint8(comp.image))
            write_pgm(out / mask_rel, comp.mask * 255)
            entries.append((split, img_rel, mask_rel))
            for r, j in enumerate(comp.jitters):
                jitter_rows.append("\t".join([split, str(k), str(r), *map(repr, j.gain),
                                              *map(repr, j.bias), repr(j.gamma)]))
    manifest = SampleManifest(entries, seed, out)
    manifest.write(out / "manifest.tsv")
    header = "split\tindex\tregion\tgain_r\tgain_g\tgain_b\tbias_r\tbias_g\tbias_b\tgamma"
    (out / "jitter.tsv").write_text("\n".join([header] + jitter_rows) + "\n")
    return manifest


def load_pair(image_path, mask_path, max_area: float = 0.5, allow_empty: bool = False):
    """Decode one pair as ``([3, H, W] float32 in [0, 1], [1, H, W] float32 {0, 1})``.

    Raises :class:`RejectedPair` when the region covers more than
    ``max_area`` of the frame or (unless ``allow_empty``) is empty.
    """
    rgb = read_ppm(image_path)
    gray = read_pgm(mask_path)
    if rgb.shape[:2] != gray.shape:
        raise DataError(f"size mismatch: {image_path} is {rgb.shape[:2]}, {mask_path} is {gray.shape}")
    mask = (gray >= 128).astype(np.float32)
    area = float(mask.mean())
    if area > max_area:
        raise RejectedPair(f"{mask_path}: region covers {area:.1%} of the frame (> {max_area:.0%})")
    if area == 0 and not allow_empty:
        raise RejectedPair(f"{mask_path}: empty mask")
    return from_uint8(rgb), mask[None]


def load_split(manifest: SampleManifest, split: str, max_area: float = 0.5, allow_empty: bool = False):
    """Stack every accepted pair of ``split``; rejected pairs are logged and skipped.

    Returns ``(images [N, 3, H, W], masks [N, 1, H, W], image_paths, n_skipped)``.
    """
    images, masks, paths = [], [], []
    skipped = 0
    for img_path, mask_path in manifest.split(split):
        try:
            img, m = load_pair(img_path, mask_path, max_area, allow_empty)
        except RejectedPair as exc:
            log.warning("skipping pair: %s", exc)
            skipped += 1
            continue
        images.append(img)
        masks.append(m)
        paths.append(os.fspath(img_path))
    if not images:
        raise DataError(f"no usable '{split}' pairs in manifest")
    return np.stack(images), np.stack(masks), paths, skipped
