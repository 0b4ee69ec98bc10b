"""Synthetic shapes task with a controllable subset shift, splitting, augmentation and IDX I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError

SUBSETS = ("tr", "val", "pre", "test")
N_GRADES = 5


@dataclass
class Subset:
    images: np.ndarray  # [N, 1, H, W]
    targets: np.ndarray  # [N]
    ids: np.ndarray  # [N], unique across a DatasetSplit
    tag: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> "Subset":
        index = np.asarray(index)
        return Subset(self.images[index], self.targets[index], self.ids[index], self.tag)


@dataclass
class DatasetSplit:
    tr: Subset
    val: Subset
    pre: Subset
    test: Subset
    # ids of the pool X_tr / X_val were selected from (X_pre plus the selected items)
    pre_pool_ids: Optional[np.ndarray] = None

    def subsets(self) -> dict[str, Subset]:
        return {"tr": self.tr, "val": self.val, "pre": self.pre, "test": self.test}

    def with_tr(self, tr: Subset) -> "DatasetSplit":
        return DatasetSplit(tr, self.val, self.pre, self.test, self.pre_pool_ids)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "binary"  # binary | ordinal
    image_size: int = 16
    size_range: tuple[float, float] = (3.0, 5.0)
    jitter: float = 1.5
    shift: float = 1.0
    noise_std: float = 0.3
    n_tr: int = 32
    n_val: int = 64
    n_pre: int = 256
    n_test: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("binary", "ordinal"):
            raise ConfigError(f"task kind must be 'binary' or 'ordinal', got {self.kind!r}")
        if self.shift < 0 or self.noise_std < 0:
            raise ConfigError("shift and noise_std must be non-negative")
        if self.image_size < 8 or self.image_size % 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        lo, hi = self.size_range
        if not 0 < lo <= hi or hi + self.jitter > self.image_size / 2:
            raise ConfigError(f"size_range {self.size_range} with jitter {self.jitter} does not fit the image")
        minimum = {"n_tr": 2, "n_val": 2, "n_pre": 1, "n_test": 2}
        for name, lo_count in minimum.items():
            if getattr(self, name) < lo_count:
                raise ConfigError(f"{name} must be >= {lo_count}, got {getattr(self, name)}")


def _draw_subset(spec: SyntheticTaskSpec, n: int, max_bias: float, rng: np.random.Generator, first_id: int, tag: str) -> Subset:
    size = spec.image_size
    labels = rng.integers(0, 2, size=n)
    extent = rng.uniform(*spec.size_range, size=n)
    centers = (size - 1) / 2 + rng.uniform(-spec.jitter, spec.jitter, size=(n, 2))
    bias = rng.uniform(0.0, max_bias, size=n) if max_bias > 0 else np.zeros(n)
    noise = rng.normal(0.0, spec.noise_std, size=(n, size, size)) if spec.noise_std > 0 else np.zeros((n, size, size))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy[None] - centers[:, 0, None, None]
    dx = xx[None] - centers[:, 1, None, None]
    r = extent[:, None, None]
    disc = dy**2 + dx**2 <= r**2
    square = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    mask = np.where(labels[:, None, None] == 0, disc, square)
    images = mask + bias[:, None, None] + noise

    if spec.kind == "binary":
        targets = labels.astype(np.float64)
    else:
        lo, hi = spec.size_range
        grade = np.floor((extent - lo) / (hi - lo) * N_GRADES)
        targets = np.clip(grade, 0, N_GRADES - 1).astype(np.float64)
    ids = np.arange(first_id, first_id + n)
    return Subset(images[:, None].astype(np.float64), targets, ids, tag)


def gen_shapes_task(spec: SyntheticTaskSpec) -> DatasetSplit:
    """Discs (class 0) vs squares (class 1) with a per-image intensity bias.

    X_tr images carry bias ~ U[0, shift]; every other subset ~ U[0, shift/4].
    Each subset has its own random stream, so changing one subset's count
    leaves the others untouched.
    """
    spec.validate()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(SUBSETS))]
    counts = {"tr": spec.n_tr, "val": spec.n_val, "pre": spec.n_pre, "test": spec.n_test}
    out = {}
    first = 0
    for name, rng in zip(SUBSETS, streams):
        max_bias = spec.shift if name == "tr" else spec.shift / 4
        out[name] = _draw_subset(spec, counts[name], max_bias, rng, first, name)
        first += counts[name]
    return DatasetSplit(**out)


def split_dataset(pool: Subset, fractions: dict[str, float], seed) -> DatasetSplit:
    """Hold out X_test first, then select X_tr and X_val from the remaining pool; X_pre is the rest.

    ``fractions`` maps ``test``, ``tr`` and ``val`` to fractions of the whole pool.
    """
    unknown = set(fractions) - {"test", "tr", "val"}
    if unknown:
        raise ConfigError(f"unknown split fractions {sorted(unknown)}")
    if any(f < 0 for f in fractions.values()) or sum(fractions.values()) > 1 + 1e-12:
        raise ConfigError(f"fractions must be non-negative and sum to <= 1, got {fractions}")
    n = len(pool)
    counts = {k: int(round(fractions.get(k, 0.0) * n)) for k in ("test", "tr", "val")}
    for k, c in counts.items():
        if c == 0:
            raise ConfigError(f"split leaves X_{k} empty (pool of {n}, fraction {fractions.get(k, 0.0)})")
    if sum(counts.values()) > n:
        raise ConfigError("rounded split sizes exceed the pool")
    order = np.random.default_rng(seed).permutation(n)
    test_idx = order[: counts["test"]]
    rest = order[counts["test"] :]
    tr_idx = rest[: counts["tr"]]
    val_idx = rest[counts["tr"] : counts["tr"] + counts["val"]]
    pre_idx = rest[counts["tr"] + counts["val"] :]

    def part(idx, tag):
        s = pool.take(idx)
        s.tag = tag
        return s

    return DatasetSplit(part(tr_idx, "tr"), part(val_idx, "val"), part(pre_idx, "pre"), part(test_idx, "test"), pool.ids[rest])


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    hflip: float = 0.5
    vflip: float = 0.5
    rotate: float = 0.5
    crop: float = 0.5
    gamma: float = 0.5
    crop_fraction: float = 0.875
    gamma_range: tuple[float, float] = (0.8, 1.25)

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def active(self) -> bool:
        return any(p > 0 for p in (self.hflip, self.vflip, self.rotate, self.crop, self.gamma))


def gamma_adjust(image: np.ndarray, gamma: float) -> np.ndarray:
    return np.clip(image, 0.0, 1.0) ** gamma


def augment(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Randomly flip, rotate by a multiple of 90 degrees, crop-and-pad and gamma-adjust a [C,H,W] image.

    Every transform draws its coin even when its probability is zero, so the
    random stream advances identically for every policy.
    """
    coins = rng.uniform(size=5)
    quarter_turns = int(rng.integers(1, 4))
    gamma = rng.uniform(*policy.gamma_range)
    H, W = image.shape[-2:]
    ch = int(round(policy.crop_fraction * H))
    cw = int(round(policy.crop_fraction * W))
    oy = int(rng.integers(0, H - ch + 1))
    ox = int(rng.integers(0, W - cw + 1))

    if policy.rotate > 0 and H != W:
        raise ConfigError(f"rotation needs square images, got {H}x{W}")
    out = image
    if coins[0] < policy.hflip:
        out = out[..., :, ::-1]
    if coins[1] < policy.vflip:
        out = out[..., ::-1, :]
    if coins[2] < policy.rotate:
        out = np.rot90(out, quarter_turns, axes=(-2, -1))
    if coins[3] < policy.crop:
        window = out[..., oy : oy + ch, ox : ox + cw]
        top, left = (H - ch) // 2, (W - cw) // 2
        padded = np.zeros_like(out)
        padded[..., top : top + ch, left : left + cw] = window
        out = padded
    if coins[4] < policy.gamma:
        out = gamma_adjust(out, gamma)
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    if not policy.active:
        return images
    return np.stack([augment(img, policy, rng) for img in images])


# ---------------------------------------------------------------- IDX files


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def write_idx(path, array) -> None:
    """Write an unsigned-byte IDX file."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise TypeError(f"IDX writer expects uint8 data, got {a.dtype}")
    if a.ndim < 1 or a.ndim > 255:
        raise ValueError("IDX supports 1 to 255 dimensions")
    header = bytes([0, 0, 0x08, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a).tobytes())


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"truncated magic: need 4 bytes, file has {len(buf)}", len(buf))
    for i in (0, 1):
        if buf[i] != 0:
            raise IdxFormatError(f"bad magic: byte {i} is 0x{buf[i]:02x}, expected 0x00", i)
    if buf[2] != 0x08:
        raise IdxFormatError(f"unsupported element type 0x{buf[2]:02x}, expected 0x08 (unsigned byte)", 2)
    ndim = buf[3]
    if ndim == 0:
        raise IdxFormatError("zero dimensions", 3)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxFormatError(f"truncated header: {ndim} extents need {end} bytes, file has {len(buf)}", len(buf))
    shape = struct.unpack(f">{ndim}I", buf[4:end])
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) < end + count:
        raise IdxFormatError(f"truncated payload: expected {count} elements, found {len(buf) - end}", len(buf))
    if len(buf) > end + count:
        raise IdxFormatError(f"trailing data after {count} elements", end + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=end).reshape(shape).copy()


def read_idx(path) -> np.ndarray:
    """Raw uint8 contents of an IDX file."""
    return parse_idx(Path(path).read_bytes())


def load_idx(path) -> np.ndarray:
    """IDX contents rescaled to [0, 1] as float64."""
    return read_idx(path).astype(np.float64) / 255.0


def quantize(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_split(split: DatasetSplit, directory) -> list[Path]:
    """Write ``<split>.idx`` (images, clipped to [0,1] and quantized) and ``<split>.targets.idx``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, subset in split.subsets().items():
        img_path = directory / f"{name}.idx"
        tgt_path = directory / f"{name}.targets.idx"
        write_idx(img_path, quantize(subset.images[:, 0]))
        write_idx(tgt_path, subset.targets.astype(np.uint8))
        written += [img_path, tgt_path]
    return written


def load_split(directory) -> DatasetSplit:
    directory = Path(directory)
    parts = {}
    first = 0
    for name in SUBSETS:
        images = load_idx(directory / f"{name}.idx")[:, None]
        targets = read_idx(directory / f"{name}.targets.idx").astype(np.float64)
        if len(images) != len(targets):
            raise ConfigError(f"{name}: {len(images)} images but {len(targets)} targets")
        parts[name] = Subset(images, targets, np.arange(first, first + len(images)), name)
        first += len(images)
    return DatasetSplit(**parts)
