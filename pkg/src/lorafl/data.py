"""Datasets, non-IID partitioning and trigger poisoning."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError, InvalidInputError
from .numkit import RngStream


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise InvalidInputError(f"images must be (N, H, W, C), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise InvalidInputError(f"{images.shape[0]} images but labels of shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise InvalidInputError("label outside class range")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


# --------------------------------------------------------------------------
# Synthetic task
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthTask:
    """Classes are smooth random cosine textures; samples add pixel noise.

    ``mix`` blends each sample with a random other class's pattern by a
    weight drawn from ``U(0, mix)``, which makes some samples ambiguous.
    """

    n_classes: int = 5
    image_shape: tuple = (16, 16, 3)
    n_components: int = 3
    max_freq: int = 2
    amplitude: float = 0.25
    noise: float = 0.1
    mix: float = 0.0
    pattern_seed: int = 0

    def patterns(self) -> np.ndarray:
        H, W, C = self.image_shape
        gen = RngStream(self.pattern_seed, ("patterns",)).generator()
        yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
        out = np.zeros((self.n_classes, H, W, C))
        for c in range(self.n_classes):
            for ch in range(C):
                for _ in range(self.n_components):
                    fy, fx = gen.integers(0, self.max_freq + 1, size=2)
                    phase = gen.uniform(0, 2 * np.pi)
                    amp = gen.normal()
                    out[c, :, :, ch] += amp * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
            out[c] /= np.abs(out[c]).max() + 1e-12
        return out


def synth_generate(task: SynthTask, n_per_class: int, rng: RngStream) -> Dataset:
    if task.n_classes < 2:
        raise ConfigError("a synthetic task needs at least 2 classes", "data.n_classes")
    pats = task.patterns()
    gen = rng.generator()
    labels = np.repeat(np.arange(task.n_classes), n_per_class)
    n = labels.size
    base = pats[labels]
    if task.mix > 0:
        other = (labels + gen.integers(1, task.n_classes, size=n)) % task.n_classes
        w = gen.uniform(0.0, task.mix, size=n)[:, None, None, None]
        base = (1.0 - w) * base + w * pats[other]
    images = 0.5 + task.amplitude * base
    if task.noise > 0:
        images = images + task.noise * gen.standard_normal(images.shape)
    order = gen.permutation(n)
    return Dataset(np.clip(images, 0.0, 1.0)[order], labels[order], task.n_classes)


def occlude(ds: Dataset, fraction: float, max_size: int, rng: RngStream) -> Dataset:
    """Paste a random-colour square of side ``1..max_size`` onto a seeded subset.

    Labels are unchanged, so a model trained on the result learns to ignore
    small solid patches.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"occlusion fraction must be in [0, 1], got {fraction}", "pretrain.occlusion")
    gen = rng.generator()
    n = len(ds)
    H, W, C = ds.image_shape
    images = ds.images.copy()
    for i in np.sort(gen.permutation(n)[: poison_count(n, fraction)]):
        s = int(gen.integers(1, min(max_size, H, W) + 1))
        r, c = int(gen.integers(0, H - s + 1)), int(gen.integers(0, W - s + 1))
        images[i, r : r + s, c : c + s, :] = gen.uniform(0.0, 1.0, size=C)
    return Dataset(images, ds.labels.copy(), ds.n_classes)


def flip_labels(ds: Dataset, fraction: float, rng: RngStream) -> Dataset:
    """Relabel a seeded ``round(fraction * n)`` subset to a uniformly drawn other class."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"label noise must be in [0, 1], got {fraction}", "data.label_noise")
    gen = rng.generator()
    n = len(ds)
    idx = np.sort(gen.permutation(n)[: poison_count(n, fraction)])
    labels = ds.labels.copy()
    labels[idx] = (labels[idx] + gen.integers(1, ds.n_classes, size=idx.size)) % ds.n_classes
    return Dataset(ds.images, labels, ds.n_classes)


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------

IDX_UBYTE_IMAGES = 0x00000803
IDX_UBYTE_COLOR = 0x00000804
IDX_UBYTE_LABELS = 0x00000801


def _read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08 or (magic & 0xFF) not in (1, 3, 4):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header != size:
        raise FormatError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return magic, np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def ingest_idx(image_path, label_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (unsigned bytes) into a [0, 1] dataset.

    Grey images (magic 0x803, ``N x H x W``) get a singleton channel axis;
    0x804 files carry ``N x H x W x C`` directly.
    """
    magic, images = _read_idx(image_path)
    if magic not in (IDX_UBYTE_IMAGES, IDX_UBYTE_COLOR):
        raise FormatError(f"{image_path}: bad image magic 0x{magic:08x}")
    lmagic, labels = _read_idx(label_path)
    if lmagic != IDX_UBYTE_LABELS:
        raise FormatError(f"{label_path}: bad label magic 0x{lmagic:08x}")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if magic == IDX_UBYTE_IMAGES:
        images = images[..., None]
    labels = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, k)


def export_idx(ds: Dataset, image_path, label_path) -> None:
    """Write ``ds`` as IDX bytes; pixels are rounded to the nearest 1/255."""
    pix = np.rint(ds.images * 255.0).astype(np.uint8)
    if pix.shape[-1] == 1:
        magic, dims = IDX_UBYTE_IMAGES, pix.shape[:3]
        pix = pix[..., 0]
    else:
        magic, dims = IDX_UBYTE_COLOR, pix.shape
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims))
        fh.write(pix.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_UBYTE_LABELS, len(ds)))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# Dirichlet partition
# --------------------------------------------------------------------------


class Partition(NamedTuple):
    clients: list

    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clients])


def _sinkhorn(P, row_sums, col_sums, iters=2000, tol=1e-10):
    P = P.copy()
    for _ in range(iters):
        P *= (row_sums / P.sum(axis=1))[:, None]
        col = P.sum(axis=0)
        P *= col_sums / col
        if np.max(np.abs(P.sum(axis=1) - row_sums)) <= tol * row_sums.max():
            break
    return P


def _round_rows(P, row_totals):
    """Largest-remainder rounding of each row to its integer total."""
    out = np.floor(P).astype(np.int64)
    for c in range(P.shape[0]):
        short = int(row_totals[c] - out[c].sum())
        if short > 0:
            frac = P[c] - out[c]
            out[c, np.argsort(-frac, kind="stable")[:short]] += 1
    return out


def dirichlet_partition(labels, n_clients: int, alpha: float, bounds, rng: RngStream,
                        max_retries: int = 1000) -> Partition:
    """Non-IID split with Dirichlet(alpha) class proportions across clients.

    Each attempt draws, for every class, a Dirichlet vector over clients and
    target client sizes uniformly inside ``bounds`` (fractions of the whole
    set); the class-by-client matrix is then rescaled to both marginals with
    Sinkhorn iterations, rounded, and accepted only if every client's share
    lies inside ``bounds``.
    """
    labels = np.asarray(labels.labels if isinstance(labels, Dataset) else labels, dtype=np.int64)
    lo, hi = bounds
    if n_clients < 1:
        raise ConfigError("need at least one client", "federation.n_clients")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}", "data.alpha")
    if not 0 <= lo <= hi <= 1:
        raise ConfigError(f"invalid size bounds {bounds}", "data.size_bounds")
    if n_clients * hi < 1.0 - 1e-12 or n_clients * lo > 1.0 + 1e-12:
        raise ConfigError(f"{n_clients} clients cannot cover the data with share bounds {bounds}",
                          "data.size_bounds")
    n = labels.size
    classes = np.unique(labels)
    class_idx = [np.flatnonzero(labels == c) for c in classes]
    class_tot = np.array([len(ix) for ix in class_idx], dtype=np.float64)
    lo_n, hi_n = lo * n, hi * n
    margin = 0.1 * (hi - lo)
    last = None
    for attempt in range(max_retries):
        gen = rng.derive(attempt).generator()
        P = gen.dirichlet(np.full(n_clients, alpha), size=classes.size)
        P = np.maximum(P, 1e-300)
        share = gen.uniform(lo + margin, hi - margin, size=n_clients) if hi > lo else np.full(n_clients, lo)
        share = share / share.sum()
        P = _sinkhorn(P * class_tot[:, None], class_tot, share * n)
        counts = _round_rows(P, class_tot)
        sizes = counts.sum(axis=0)
        last = sizes
        if sizes.min() < lo_n - 1e-9 or sizes.max() > hi_n + 1e-9:
            continue
        clients = [[] for _ in range(n_clients)]
        for c, ix in enumerate(class_idx):
            ix = ix[gen.permutation(ix.size)]
            cuts = np.concatenate([[0], np.cumsum(counts[c])])
            for k in range(n_clients):
                clients[k].append(ix[cuts[k] : cuts[k + 1]])
        return Partition([np.sort(np.concatenate(parts)) for parts in clients])
    raise ConfigError(
        f"no partition within bounds after {max_retries} attempts "
        f"(last sizes min {last.min()}, max {last.max()}, allowed [{lo_n:.1f}, {hi_n:.1f}])",
        "data.size_bounds",
    )


# --------------------------------------------------------------------------
# Triggers
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    row: int
    col: int
    pattern: np.ndarray
    target: int

    def __post_init__(self):
        pat = np.asarray(self.pattern, dtype=np.float64)
        if pat.ndim != 3:
            raise ConfigError("trigger pattern must be (height, width, channels)", "attack.trigger")
        if pat.min() < 0.0 or pat.max() > 1.0:
            raise ConfigError("trigger pixels must lie in [0, 1]", "attack.trigger")
        object.__setattr__(self, "pattern", pat)

    @property
    def height(self):
        return self.pattern.shape[0]

    @property
    def width(self):
        return self.pattern.shape[1]

    def footprint(self) -> set:
        return {(self.row + i, self.col + j) for i in range(self.height) for j in range(self.width)}

    def with_pattern(self, pattern) -> "TriggerSpec":
        return TriggerSpec(self.row, self.col, np.clip(pattern, 0.0, 1.0), self.target)

    def check(self, image_shape):
        H, W, C = image_shape
        if self.row < 0 or self.col < 0 or self.row + self.height > H or self.col + self.width > W:
            raise ConfigError(
                f"trigger {self.height}x{self.width} at ({self.row}, {self.col}) outside {H}x{W} image",
                "attack.trigger",
            )
        if self.pattern.shape[2] != C:
            raise ConfigError(f"trigger has {self.pattern.shape[2]} channels, image has {C}", "attack.trigger")


def solid_trigger(row, col, height, width, color, target) -> TriggerSpec:
    color = np.asarray(color, dtype=np.float64)
    return TriggerSpec(row, col, np.broadcast_to(color, (height, width, color.size)).copy(), target)


def apply_trigger(images, t: TriggerSpec) -> np.ndarray:
    """Return a copy of ``images`` (one image or a batch) with the patch pasted in."""
    x = np.array(images, dtype=np.float64)
    t.check(x.shape[-3:])
    x[..., t.row : t.row + t.height, t.col : t.col + t.width, :] = t.pattern
    return x


def poison_count(n: int, p: float) -> int:
    return int(math.floor(p * n + 0.5))


def poison(ds: Dataset, t: TriggerSpec, p: float, rng: RngStream):
    """Trigger a seeded ``round(p * n)`` subset and relabel it to the target.

    Returns ``(poisoned_copy, indices)``; ``ds`` is left untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"poison ratio must be in [0, 1], got {p}", "attack.poison_ratio")
    k = poison_count(len(ds), p)
    idx = np.sort(rng.generator().permutation(len(ds))[:k])
    images = ds.images.copy()
    labels = ds.labels.copy()
    if k:
        images[idx] = apply_trigger(images[idx], t)
        labels[idx] = t.target
    return Dataset(images, labels, ds.n_classes), idx


def dba_split(t: TriggerSpec) -> list:
    """Four quadrant sub-triggers; the top-left one takes the ceiling halves."""
    h, w = t.height, t.width
    if h < 2 or w < 2:
        raise ConfigError(f"trigger {h}x{w} too small to split into quadrants", "attack.trigger")
    h1, w1 = (h + 1) // 2, (w + 1) // 2
    out = []
    for r0, r1 in ((0, h1), (h1, h)):
        for c0, c1 in ((0, w1), (w1, w)):
            out.append(TriggerSpec(t.row + r0, t.col + c0, t.pattern[r0:r1, c0:c1], t.target))
    return out


def build_poisoned_testset(ds: Dataset, t: TriggerSpec) -> Dataset:
    """Triggered copies of every test sample whose true label differs from the target."""
    keep = np.flatnonzero(ds.labels != t.target)
    if keep.size == 0:
        return Dataset(np.zeros((0,) + ds.image_shape), np.zeros(0, dtype=np.int64), ds.n_classes)
    return Dataset(apply_trigger(ds.images[keep], t), ds.labels[keep], ds.n_classes)
