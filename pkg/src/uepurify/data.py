"""Image sets, the synthetic glyph generator, the ``UEPD`` container and PSNR."""
from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MAGIC = b"UEPD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIBBf")
BOUND_CODES = {None: 0, "linf": 1, "l2": 2, "l0": 3}
PSNR_CAP = 120.0


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class InvariantViolationError(ContainerError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    def validate(self) -> "LabeledImageSet":
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise InvariantViolationError(f"bad shapes {self.images.shape} / {self.labels.shape}")
        if len(self) < 1 or self.class_count < 2:
            raise InvariantViolationError("need N >= 1 and K >= 2")
        if not (np.all(self.images >= 0) and np.all(self.images <= 1)):
            raise InvariantViolationError("pixel values outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InvariantViolationError(f"labels outside [0, {self.class_count})")
        return self

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_count)

    def with_images(self, images) -> "LabeledImageSet":
        return LabeledImageSet(images, self.labels.copy(), self.class_count)


@dataclass(frozen=True)
class NormBound:
    kind: str  # linf | l2 | l0
    epsilon: float

    def __post_init__(self):
        if self.kind not in ("linf", "l2", "l0"):
            raise ValueError(f"unknown bound kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class PerturbationSet:
    deltas: np.ndarray
    bound: NormBound
    classwise: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = np.ascontiguousarray(self.deltas, dtype=np.float32)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.deltas.reshape(len(self.deltas), -1).astype(np.float64), axis=1)

    def satisfies_bound(self) -> bool:
        d = self.deltas.reshape(len(self.deltas), -1)
        eps = self.bound.epsilon
        if self.bound.kind == "linf":
            return bool(np.abs(d).max(initial=0) <= np.float32(eps))
        if self.bound.kind == "l2":
            return bool(np.all(self.norms() <= eps * (1 + 1e-5)))
        # l0 counts pixel positions (any channel nonzero)
        n, c = self.deltas.shape[:2]
        touched = np.any(self.deltas != 0, axis=1).reshape(n, -1).sum(axis=1)
        return bool(np.all(touched <= eps))


# --------------------------------------------------------------------------- metrics


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0 over the whole array; capped at 120 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def split_dataset(ds: LabeledImageSet, fraction: float, seed: int):
    """Stratified split; ``part_a`` gets ``round(fraction * n_k)`` of every class k."""
    if not 0 < fraction < 1 or fraction * len(ds) < 1:
        raise ValueError(f"invalid fraction {fraction} for {len(ds)} samples")
    rng = np.random.default_rng(seed)
    a_idx = []
    for k in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == k)
        take = int(round(fraction * len(idx)))
        a_idx.append(rng.permutation(idx)[:take])
    a = np.sort(np.concatenate(a_idx))
    b = np.setdiff1d(np.arange(len(ds)), a)
    return ds.subset(a), ds.subset(b)


# --------------------------------------------------------------------------- container


def write_container(ds: LabeledImageSet, path, perturb: PerturbationSet | None = None) -> None:
    ds.validate()
    n, c, h, w = ds.images.shape
    if ds.class_count > 0xFFFF:
        raise InvariantViolationError("labels are stored as u16")
    if perturb is not None and perturb.deltas.shape != ds.images.shape:
        raise InvariantViolationError("perturbation shape differs from images")
    kind = None if perturb is None else perturb.bound.kind
    eps = 0.0 if perturb is None else perturb.bound.epsilon
    header = _HEADER.pack(MAGIC, VERSION, n, ds.class_count, c, h, w, perturb is not None, BOUND_CODES[kind], eps)
    with open(path, "wb") as f:
        f.write(header)
        f.write(ds.images.astype("<f4").tobytes())
        f.write(ds.labels.astype("<u2").tobytes())
        if perturb is not None:
            f.write(perturb.deltas.astype("<f4").tobytes())


def read_container(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC[: len(raw)]:
        raise BadMagicError(f"{path}: not a UEPD container")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header cut short")
    _, version, n, k, c, h, w, has_p, kind_code, eps = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    count = n * c * h * w
    expected = _HEADER.size + 4 * count + 2 * n + (4 * count if has_p else 0)
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f4", count, off).reshape(n, c, h, w).astype(np.float32)
    off += 4 * count
    labels = np.frombuffer(raw, "<u2", n, off).astype(np.int64)
    off += 2 * n
    ds = LabeledImageSet(images, labels, k).validate()
    perturb = None
    if has_p:
        kinds = {v: key for key, v in BOUND_CODES.items()}
        if kind_code not in kinds or kinds[kind_code] is None:
            raise InvariantViolationError(f"{path}: bad bound kind {kind_code}")
        deltas = np.frombuffer(raw, "<f4", count, off).reshape(n, c, h, w).astype(np.float32)
        try:
            bound = NormBound(kinds[kind_code], float(eps))
        except ValueError as e:
            raise InvariantViolationError(str(e)) from e
        perturb = PerturbationSet(deltas, bound)
    return ds, perturb


# --------------------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    """Glyph classes drawn faintly over busy backgrounds.

    Class identity lives only in the glyph shape (and its rough vertical
    position); glyph colour, polarity and the background are random per
    sample, so the semantic signal is real but slow to learn.
    """

    class_count: int = 10
    train_per_class: int = 500
    test_per_class: int = 200
    height: int = 16
    width: int = 16
    channels: int = 3
    noise: float = 0.01
    contrast: tuple = (0.2, 0.4)  # glyph offset from the background, before colour scaling
    edge_blur: float = 0.6  # gaussian sigma (px) applied to the anti-aliased glyph mask
    blobs: int = 2
    jitter: bool = True
    seed: int = 0

    def validate(self):
        if self.class_count < 2 or self.height < 8 or self.width < 8:
            raise ValueError("need class_count >= 2 and height, width >= 8")
        if self.train_per_class < 1 or self.test_per_class < 1 or self.noise < 0:
            raise ValueError("invalid sample counts or noise level")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        lo, hi = self.contrast
        if not 0 <= lo <= hi or self.edge_blur < 0 or self.blobs < 0:
            raise ValueError("invalid contrast range, edge_blur or blob count")
        return self


def _glyph(kind: int, yy, xx, cy, cx, s):
    """Boolean mask of glyph ``kind`` centred at (cy, cx) with half-size s."""
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    r = np.hypot(dy, dx)
    kind %= 10
    if kind == 0:  # disk
        return r <= s
    if kind == 1:  # ring
        return (r <= s) & (r >= s - 1.6)
    if kind == 2:  # horizontal bar
        return (ady <= 1) & (adx <= s + 1)
    if kind == 3:  # vertical bar
        return (adx <= 1) & (ady <= s + 1)
    if kind == 4:  # plus
        return ((ady <= 0.6) & (adx <= s)) | ((adx <= 0.6) & (ady <= s))
    if kind == 5:  # x
        return (np.abs(ady - adx) <= 0.7) & (ady <= s)
    if kind == 6:  # checker
        return (ady <= s) & (adx <= s) & ((np.floor(dy / 2) + np.floor(dx / 2)) % 2 == 0)
    if kind == 7:  # hollow square
        return (np.maximum(ady, adx) <= s) & (np.maximum(ady, adx) >= s - 1)
    if kind == 8:  # triangle pointing up
        return (dy <= s) & (dy >= -s) & (adx <= (dy + s) / 2)
    return (np.abs(r - s / 2) <= 0.7) | (r <= 0.8)  # dot in a ring


_SUPERSAMPLE = 4


def _soft_glyph(kind, cy, cx, s, cfg: SynthConfig):
    """Glyph coverage in [0, 1]: 4x supersampled, then optionally blurred."""
    H, W, ss = cfg.height, cfg.width, _SUPERSAMPLE
    fy, fx = np.mgrid[0 : H * ss, 0 : W * ss].astype(np.float64)
    fy, fx = (fy + 0.5) / ss - 0.5, (fx + 0.5) / ss - 0.5
    cover = _glyph(kind, fy, fx, cy, cx, s).reshape(H, ss, W, ss).mean(axis=(1, 3))
    return gaussian_filter(cover, cfg.edge_blur) if cfg.edge_blur > 0 else cover


def _class_rows(cfg: SynthConfig):
    # classes sit on one of three rows; the row alone is not enough to classify
    return [cfg.height / 2 + (k % 3 - 1) * cfg.height / 8 for k in range(cfg.class_count)]


def _draw(cfg: SynthConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, H, W, C = len(labels), cfg.height, cfg.width, cfg.channels
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    rows = _class_rows(cfg)
    s = min(H, W) / 4
    jit = 1.0 if cfg.jitter else 0.0
    out = np.empty((n, 3, H, W), dtype=np.float64)
    for i, y in enumerate(labels):
        base = rng.uniform(0.15, 0.85, 3) if cfg.jitter else np.full(3, 0.5)
        gy, gx = jit * rng.uniform(-0.03, 0.03, (2, 3))
        img = base[:, None, None] + gy[:, None, None] * (yy - H / 2) + gx[:, None, None] * (xx - W / 2)
        for _ in range(cfg.blobs):
            by, bx = rng.uniform(0, H), rng.uniform(0, W)
            rad = rng.uniform(2.5, 5.0)
            amp = jit * rng.uniform(-0.25, 0.25, 3)
            img = img + amp[:, None, None] * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * rad**2))[None]
        oy, ox = jit * rng.uniform(-2, 2, 2)
        cover = _soft_glyph(int(y), rows[y] + oy, W / 2 + ox, s, cfg)
        rgb = np.array(colorsys.hsv_to_rgb(rng.uniform(), 0.6, 1.0))
        rgb *= 1.7 / np.linalg.norm(rgb)
        sign = rng.choice([-1.0, 1.0])
        img = img + cover[None] * (sign * rng.uniform(*cfg.contrast) * rgb)[:, None, None]
        out[i] = img
    if C == 1:
        out = out.mean(axis=1, keepdims=True)
    if cfg.noise > 0:
        out += rng.normal(0.0, cfg.noise, out.shape)
    return np.clip(out, 0, 1).astype(np.float32)


def generate_synthetic_dataset(cfg: SynthConfig | None = None):
    """Return ``(train, test)`` drawn i.i.d. from the same glyph process."""
    cfg = (cfg or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    sets = []
    for per_class in (cfg.train_per_class, cfg.test_per_class):
        labels = np.repeat(np.arange(cfg.class_count), per_class)
        sets.append(LabeledImageSet(_draw(cfg, labels, rng), labels, cfg.class_count))
    return sets[0], sets[1]
