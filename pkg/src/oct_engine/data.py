"""Dataset manifests, image decoding, synthetic data, sampling, augmentation.

The augmentation pipeline is driven by a low-discrepancy (scrambled Halton)
sampler: each training sample consumes one sampler index, and every random
decision reads a fixed dimension of that index, which makes batches
bit-reproducible and independent of worker scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

CLASS_NAMES = ["NORMAL", "CNV", "DME", "DRUSEN"]
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
TIERS = ("golden", "tfl")

# identity window for jitter factors; keeps the degenerate (midpoint) sampler
# path bit-identical to the deterministic eval transform
_JITTER_EPS = 1e-9


class DataError(Exception):
    """Unreadable or malformed data (files, manifests, images)."""


# ---------------------------------------------------------------------------
# records and manifests


@dataclass
class SampleRecord:
    path: str
    label: int
    tier: str
    weight: float


def load_manifest(path, golden_weight: float = 1.0, tfl_weight: float = 0.3) -> list[SampleRecord]:
    """Parse a ``path,label,tier`` CSV manifest into sample records.

    Labels use the canonical class order (NORMAL=0, CNV=1, DME=2, DRUSEN=3);
    relative image paths are resolved against the manifest's directory.
    """
    if golden_weight < tfl_weight or tfl_weight <= 0:
        raise ValueError(
            f"need golden_weight >= tfl_weight > 0, got {golden_weight}, {tfl_weight}"
        )
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "tier"]:
            raise DataError(f"{path}: expected header path,label,tier, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img, label, tier = (f.strip() for f in row)
            if label not in CLASS_IDS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r}")
            if tier not in TIERS:
                raise DataError(f"{path}:{lineno}: unknown tier {tier!r}")
            if img in seen:
                logger.warning("%s:%d: duplicate path %s", path, lineno, img)
            seen.add(img)
            resolved = Path(img)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            weight = golden_weight if tier == "golden" else tfl_weight
            records.append(SampleRecord(str(resolved), CLASS_IDS[label], tier, weight))
    counts = class_counts(records)
    logger.info("loaded %d records from %s, per-class counts %s", len(records), path, counts)
    return records


def class_counts(records) -> list[int]:
    counts = [0] * len(CLASS_NAMES)
    for r in records:
        counts[r.label] += 1
    return counts


# ---------------------------------------------------------------------------
# image IO


def _read_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if tokens[0] != b"P5":
        raise DataError(f"{path}: unsupported PGM magic {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header") from e
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 PGM supported, got {maxval}")
    data = raw[i + 1:i + 1 + w * h]
    if len(data) < w * h:
        raise DataError(f"{path}: truncated PGM payload ({len(data)} of {w * h} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a (H,W) uint8 array as binary PGM (deterministic bytes)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def decode_image(path) -> np.ndarray:
    """Decode a PNG or PGM file to an (H,W,3) uint8 array.

    Grayscale inputs are replicated across the three channels.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    if path.suffix.lower() == ".pgm":
        img = _read_pgm(path)
    else:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as im:
                im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
                img = np.asarray(im)
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            raise DataError(f"{path}: cannot decode image: {e}") from e
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise DataError(f"{path}: image too small: {img.shape[:2]}")
    return np.ascontiguousarray(img, dtype=np.uint8)


# ---------------------------------------------------------------------------
# synthetic OCT-like data


def _draw_ellipse(img, cy, cx, ry, rx, value):
    h, w = img.shape
    y0, y1 = max(0, int(cy - ry)), min(h, int(cy + ry) + 1)
    x0, x1 = max(0, int(cx - rx)), min(w, int(cx + rx) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[y0:y1, x0:x1][mask] = value
    return [y0, y1, x0, x1]


def _synth_image(class_id: int, size: int, rng: np.random.Generator):
    """One synthetic scan: horizontal retinal-layer stripes plus a class signature."""
    img = np.full((size, size), 15.0)
    top = int(size * 0.30) + int(rng.integers(-size // 16, size // 16 + 1))
    bot = int(size * 0.70) + int(rng.integers(-size // 16, size // 16 + 1))
    shades = [175.0, 90.0, 150.0, 70.0, 120.0]
    edges = np.linspace(top, bot, len(shades) + 1).astype(int)
    for k, shade in enumerate(shades):
        img[edges[k]:edges[k + 1], :] = shade

    bbox = None
    if class_id == CLASS_IDS["CNV"]:
        # bright blob under the layer stack
        cy = bot + size * 0.08 + rng.uniform(-2, 2)
        cx = rng.uniform(size * 0.25, size * 0.75)
        bbox = _draw_ellipse(img, cy, cx, size * 0.07, size * 0.12, 230.0)
    elif class_id == CLASS_IDS["DME"]:
        # dark cavity inside the layers
        cy = (top + bot) / 2 + rng.uniform(-2, 2)
        cx = rng.uniform(size * 0.25, size * 0.75)
        bbox = _draw_ellipse(img, cy, cx, size * 0.08, size * 0.11, 20.0)
    elif class_id == CLASS_IDS["DRUSEN"]:
        # small periodic bumps along the bottom layer boundary
        n_bumps = int(rng.integers(4, 7))
        centers = np.linspace(size * 0.2, size * 0.8, n_bumps)
        boxes = []
        for cx in centers:
            cx = cx + rng.uniform(-2, 2)
            boxes.append(_draw_ellipse(img, bot, cx, size * 0.05, size * 0.035, 210.0))
        boxes = np.array(boxes)
        bbox = [int(boxes[:, 0].min()), int(boxes[:, 1].max()),
                int(boxes[:, 2].min()), int(boxes[:, 3].max())]
    img += rng.normal(0.0, 6.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), bbox


def synth_generate(n_per_class: int, size: int, seed: int, out_dir) -> Path:
    """Write a 4-class synthetic dataset: PGM images, manifest, lesion boxes.

    Within each class the first 80% of samples are tier ``golden`` and the
    rest ``tfl``.  Returns the manifest path; lesion bounding boxes land in
    ``lesions.json`` next to it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    lesions = {}
    n_golden = -(-n_per_class * 4 // 5)
    for class_id, name in enumerate(CLASS_NAMES):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, class_id, i])
            img, bbox = _synth_image(class_id, size, rng)
            fname = f"{name.lower()}_{i:04d}.pgm"
            write_pgm(out_dir / fname, img)
            tier = "golden" if i < n_golden else "tfl"
            rows.append((fname, name, tier))
            if bbox is not None:
                lesions[fname] = bbox
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "tier"])
        writer.writerows(rows)
    with open(out_dir / "lesions.json", "w", encoding="utf-8") as fh:
        json.dump(lesions, fh, indent=0, sort_keys=True)
    return manifest


def load_lesion_boxes(out_dir) -> dict:
    with open(Path(out_dir) / "lesions.json", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# quasi-random sampler


def _primes(n: int) -> list[int]:
    out, cand = [], 2
    while len(out) < n:
        if all(cand % p for p in out):
            out.append(cand)
        cand += 1
    return out


_PRIMES64 = _primes(64)


def _halton(index: int, base: int, perm: np.ndarray | None) -> float:
    f, r, i = 1.0, 0.0, index
    while i > 0:
        f /= base
        d = i % base
        if perm is not None:
            d = int(perm[d])
        r += f * d
        i //= base
    return r


class HaltonSampler:
    """Scrambled Halton sequence over a fixed number of dimensions.

    ``value(dim)`` reads dimension ``dim`` at the current index without side
    effects; ``advance()`` moves to the next point.  With ``quasi=False`` the
    same interface is served by a counter-based PRNG instead (the fallback
    mode), with identical determinism guarantees.
    """

    def __init__(self, dims: int, scramble_seed: int | None = None, quasi: bool = True):
        if dims < 1 or dims > len(_PRIMES64):
            raise ValueError(f"dims must be in [1, {len(_PRIMES64)}], got {dims}")
        self.dims = dims
        self.quasi = quasi
        self.scramble_seed = scramble_seed
        self.bases = _PRIMES64[:dims]
        self._perms: list[np.ndarray | None] = []
        for base in self.bases:
            if scramble_seed is None:
                self._perms.append(None)
            else:
                rng = np.random.default_rng([scramble_seed, base])
                perm = np.concatenate([[0], rng.permutation(np.arange(1, base))])
                self._perms.append(perm)
        self._index = 1   # index 0 is the all-zeros point; skip it

    @property
    def index(self) -> int:
        return self._index

    def advance(self) -> None:
        self._index += 1

    def jump(self, index: int) -> None:
        if index < 1:
            raise ValueError("index must be >= 1")
        self._index = index

    def value(self, dim: int) -> float:
        return self.value_at(self._index, dim)

    def value_at(self, index: int, dim: int) -> float:
        if not (0 <= dim < self.dims):
            raise ValueError(f"dim {dim} out of range [0, {self.dims})")
        if not self.quasi:
            seed = 0 if self.scramble_seed is None else self.scramble_seed
            return float(np.random.default_rng([seed, index, dim]).random())
        return _halton(index, self.bases[dim], self._perms[dim])

    def at(self, index: int) -> "_SamplerView":
        return _SamplerView(self, index)


class _SamplerView:
    """Read-only view of a sampler pinned to one index (for batch workers)."""

    def __init__(self, sampler: HaltonSampler, index: int):
        self._sampler = sampler
        self._index = index

    def value(self, dim: int) -> float:
        return self._sampler.value_at(self._index, dim)


def halton_next(sampler: HaltonSampler, dim: int) -> float:
    """Read dimension ``dim`` at the sampler's current index (no advance)."""
    return sampler.value(dim)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    resize: tuple[int, int] = (256, 256)
    crop: tuple[int, int] = (224, 224)
    flip_lr_prob: float = 0.5
    flip_ud_prob: float = 0.5
    hue_delta_max: float = 0.05
    contrast_range: tuple[float, float] = (0.8, 1.2)
    saturation_range: tuple[float, float] = (0.8, 1.2)
    mask_count_range: tuple[int, int] = (5, 8)
    mask_size_range: tuple[float, float] = (0.05, 0.20)
    quasi_random: bool = True

    def validate(self):
        if self.crop[0] > self.resize[0] or self.crop[1] > self.resize[1]:
            raise ValueError(f"crop {self.crop} exceeds resize {self.resize}")
        lo, hi = self.mask_count_range
        if not (0 <= lo <= hi <= 16):
            raise ValueError(f"mask_count_range must lie within [0, 16], got {self.mask_count_range}")
        for p in (self.flip_lr_prob, self.flip_ud_prob):
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"flip probability out of [0, 1]: {p}")
        if self.hue_delta_max < 0 or self.hue_delta_max > 0.5:
            raise ValueError(f"hue_delta_max out of [0, 0.5]: {self.hue_delta_max}")
        for rng_ in (self.contrast_range, self.saturation_range, self.mask_size_range):
            if rng_[0] > rng_[1] or rng_[0] < 0:
                raise ValueError(f"invalid range {rng_}")

    def sampler_dims(self) -> int:
        # crop x/y, flips, hue, contrast, saturation, mask count, 4 per mask
        return 8 + 4 * self.mask_count_range[1]

    def to_dict(self) -> dict:
        return {
            "resize": list(self.resize), "crop": list(self.crop),
            "flip_lr_prob": self.flip_lr_prob, "flip_ud_prob": self.flip_ud_prob,
            "hue_delta_max": self.hue_delta_max,
            "contrast_range": list(self.contrast_range),
            "saturation_range": list(self.saturation_range),
            "mask_count_range": list(self.mask_count_range),
            "mask_size_range": list(self.mask_size_range),
            "quasi_random": self.quasi_random,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        kw = dict(d)
        for key in ("resize", "crop", "contrast_range", "saturation_range",
                    "mask_count_range", "mask_size_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic bilinear resize of an (H,W,C) image to float32."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = img[y0][:, x0] * (1 - fx[None, :, None]) + img[y0][:, x1] * fx[None, :, None]
    bottom = img[y1][:, x0] * (1 - fx[None, :, None]) + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy[:, None, None]) + bottom * fy[:, None, None]


def standardize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std over all pixels and channels (std clamped at 1e-6)."""
    img = np.asarray(image, dtype=np.float32)
    mean = np.float32(img.mean(dtype=np.float64))
    std = np.float32(img.std(dtype=np.float64))
    return (img - mean) / max(std, np.float32(1e-6))


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    c = maxc - minc
    s = np.where(maxc > 0, c / np.where(maxc > 0, maxc, 1), 0.0)
    safe_c = np.where(c > 0, c, 1)
    h = np.where(
        maxc == r, ((g - b) / safe_c) % 6,
        np.where(maxc == g, (b - r) / safe_c + 2, (r - g) / safe_c + 4),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(image: np.ndarray, hue_delta: float, contrast: float,
                 saturation: float) -> np.ndarray:
    """Hue shift and saturation scale in HSV space, then contrast about the mean.

    Identity factors (within 1e-9) skip each transform entirely so the
    degenerate-sampler path stays bit-exact.
    """
    img = np.asarray(image, dtype=np.float32)
    if abs(hue_delta) > _JITTER_EPS or abs(saturation - 1.0) > _JITTER_EPS:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0).astype(np.float64))
        hsv[..., 0] = (hsv[..., 0] + hue_delta) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        img = _hsv_to_rgb(hsv).astype(np.float32)
    if abs(contrast - 1.0) > _JITTER_EPS:
        mean = np.float32(img.mean(dtype=np.float64))
        img = np.clip((img - mean) * np.float32(contrast) + mean, 0.0, 1.0)
    return img


def mask_rects(h: int, w: int, count_range, size_range, uniforms) -> list[tuple]:
    """Rectangle list for random masking from pre-drawn uniforms.

    ``uniforms`` needs 1 + 4 * count_range[1] values: the count draw, then
    (x, y, width, height) per potential mask.  Rectangles are clipped to the
    image and may overlap.
    """
    lo, hi = int(count_range[0]), int(count_range[1])
    if lo > hi:
        raise ValueError(f"invalid count range {count_range}")
    count = lo + int(uniforms[0] * (hi - lo + 1)) if hi > lo else lo
    count = min(count, hi)
    side = min(h, w)
    rects = []
    for k in range(count):
        ux, uy, uw, uh = uniforms[1 + 4 * k: 5 + 4 * k]
        mw = max(1, round((size_range[0] + uw * (size_range[1] - size_range[0])) * side))
        mh = max(1, round((size_range[0] + uh * (size_range[1] - size_range[0])) * side))
        x0 = int(ux * w)
        y0 = int(uy * h)
        rects.append((y0, min(y0 + mh, h), x0, min(x0 + mw, w)))
    return rects


def random_mask(image: np.ndarray, count_range, size_range, fill=None,
                rng: np.random.Generator | None = None,
                uniforms=None) -> np.ndarray:
    """Paint random axis-aligned rectangles with a fill value (HWC image).

    Draws come either from ``rng`` or from a pre-drawn ``uniforms`` sequence;
    ``fill=None`` uses the image mean computed before masking.
    """
    img = np.array(image, dtype=np.float32)
    h, w = img.shape[:2]
    if uniforms is None:
        if rng is None:
            raise ValueError("random_mask needs an rng or a uniforms sequence")
        uniforms = rng.random(1 + 4 * int(count_range[1]))
    if fill is None:
        fill = float(img.mean(dtype=np.float64))
    for y0, y1, x0, x1 in mask_rects(h, w, count_range, size_range, uniforms):
        img[y0:y1, x0:x1] = fill
    return img


# dimension layout of the augmentation sampler
_DIM_CROP_X, _DIM_CROP_Y, _DIM_FLIP_LR, _DIM_FLIP_UD = 0, 1, 2, 3
_DIM_HUE, _DIM_CONTRAST, _DIM_SATURATION, _DIM_MASK = 4, 5, 6, 7


def augment_train(image: np.ndarray, cfg: AugmentConfig, sampler) -> np.ndarray:
    """Full train-time transform: resize, random crop, flips, color jitter,
    random masking, standardization.  Returns a (3, crop_h, crop_w) float32
    tensor; every random decision reads a fixed sampler dimension.
    """
    img = resize_bilinear(image, *cfg.resize)
    ch, cw = cfg.crop
    max_y = cfg.resize[0] - ch
    max_x = cfg.resize[1] - cw
    y0 = min(int(sampler.value(_DIM_CROP_Y) * (max_y + 1)), max_y)
    x0 = min(int(sampler.value(_DIM_CROP_X) * (max_x + 1)), max_x)
    img = img[y0:y0 + ch, x0:x0 + cw]
    if sampler.value(_DIM_FLIP_LR) < cfg.flip_lr_prob:
        img = img[:, ::-1]
    if sampler.value(_DIM_FLIP_UD) < cfg.flip_ud_prob:
        img = img[::-1, :]
    img = np.ascontiguousarray(img) / np.float32(255.0)
    hue = (2.0 * sampler.value(_DIM_HUE) - 1.0) * cfg.hue_delta_max
    clo, chi = cfg.contrast_range
    slo, shi = cfg.saturation_range
    img = color_jitter(img, hue,
                       clo + sampler.value(_DIM_CONTRAST) * (chi - clo),
                       slo + sampler.value(_DIM_SATURATION) * (shi - slo))
    if cfg.mask_count_range[1] > 0:
        uniforms = [sampler.value(_DIM_MASK)]
        for k in range(cfg.mask_count_range[1]):
            uniforms.extend(sampler.value(8 + 4 * k + j) for j in range(4))
        img = random_mask(img, cfg.mask_count_range, cfg.mask_size_range,
                          uniforms=uniforms)
    img = standardize(img)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def eval_transform(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic inference transform: resize, center crop, standardize."""
    img = resize_bilinear(image, *cfg.resize)
    ch, cw = cfg.crop
    y0 = (cfg.resize[0] - ch) // 2
    x0 = (cfg.resize[1] - cw) // 2
    img = img[y0:y0 + ch, x0:x0 + cw]
    img = np.ascontiguousarray(img) / np.float32(255.0)
    img = standardize(img)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray     # (B, 3, crop_h, crop_w) float32
    labels: np.ndarray     # (B,) int64
    weights: np.ndarray    # (B,) float32
    paths: list[str]


def sample_indices(records, batch_size: int, balanced: bool,
                   rng: np.random.Generator, num_classes: int | None = None) -> list[int]:
    """Pick record indices for one batch.

    Balanced mode draws each class with equal probability; ``num_classes``
    makes missing classes an error instead of silently sampling the present
    ones.
    """
    if not records:
        raise DataError("cannot sample from an empty record list")
    if not balanced:
        return [int(rng.integers(len(records))) for _ in range(batch_size)]
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    if num_classes is not None:
        missing = [c for c in range(num_classes) if c not in by_class]
        if missing:
            raise DataError(
                f"balanced sampling with empty classes: {[CLASS_NAMES[c] for c in missing]}"
            )
    classes = sorted(by_class)
    if batch_size < len(classes):
        raise DataError(
            f"balanced batch_size {batch_size} < number of classes {len(classes)}"
        )
    out = []
    for _ in range(batch_size):
        c = classes[int(rng.integers(len(classes)))]
        pool = by_class[c]
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def next_batch(records, batch_size: int, balanced: bool, rng: np.random.Generator,
               cfg: AugmentConfig, sampler: HaltonSampler,
               cache: dict | None = None, train: bool = True,
               num_classes: int | None = None) -> Batch:
    """Assemble one augmented batch; advances the sampler once per sample."""
    chosen = sample_indices(records, batch_size, balanced, rng, num_classes)
    images, labels, weights, paths = [], [], [], []
    for i in chosen:
        rec = records[i]
        img = cache.get(rec.path) if cache is not None else None
        if img is None:
            img = decode_image(rec.path)
            if cache is not None:
                cache[rec.path] = img
        if train:
            images.append(augment_train(img, cfg, sampler.at(sampler.index)))
            sampler.advance()
        else:
            images.append(eval_transform(img, cfg))
        labels.append(rec.label)
        weights.append(rec.weight)
        paths.append(rec.path)
    return Batch(
        images=np.stack(images).astype(np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        weights=np.asarray(weights, dtype=np.float32),
        paths=paths,
    )
