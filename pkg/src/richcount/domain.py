"""Core data types shared across the package."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

SPLITS = ("train", "val", "test")
PARAM_GROUPS = ("backbone_visual", "backbone_text", "ffn", "adapter", "fusion", "decoder")
MIN_SIDE = 16


class RichCountError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(RichCountError):
    """Incompatible dimensions or invalid hyperparameters."""


class FormatError(RichCountError):
    """A file does not conform to its documented format."""


class CorruptMapError(RichCountError):
    """A density map contains non-finite entries."""


class FrozenParameterError(RichCountError):
    """A parameter group outside the active training phase changed."""


class DatasetError(RichCountError):
    """Dataset ingestion failed; ``ids`` lists the offending records."""

    def __init__(self, message, ids=()):
        super().__init__(message)
        self.ids = list(ids)


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray
    category: str
    dots: tuple = ()
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "pixels", _readonly(self.pixels))
        object.__setattr__(self, "dots", tuple((float(x), float(y)) for x, y in self.dots))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def count(self):
        return len(self.dots)


@dataclass(frozen=True)
class PromptSet:
    t_p: str
    t_d: str = ""
    t_d_prime: str = ""
    # set when a variant had to be synthesized or a rewrite rule did not fire
    flagged: bool = False

    def variant(self, name):
        return {"category": self.t_p, "description": self.t_d, "generalized": self.t_d_prime}[name]

    def validate(self):
        problems = []
        if not self.t_p.strip():
            problems.append("t_p is empty")
        if self.t_d_prime and _contains_token(self.t_d_prime, self.t_p):
            problems.append("t_d_prime still contains the category")
        return problems


PROMPT_VARIANTS = ("category", "description", "generalized")


def _contains_token(text, phrase):
    words = text.lower().split()
    target = phrase.lower().split()
    n = len(target)
    return n > 0 and any(words[i:i + n] == target for i in range(len(words) - n + 1))


@dataclass(frozen=True)
class DensityMap:
    grid: np.ndarray

    def __post_init__(self):
        g = _readonly(self.grid)
        if g.ndim != 2:
            raise ValueError(f"density grid must be 2-D, got shape {g.shape}")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    def __add__(self, other):
        return DensityMap(self.grid + other.grid)

    def __mul__(self, scalar):
        return DensityMap(self.grid * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True)
class EmbeddingBatch:
    vectors: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = _readonly(np.atleast_2d(self.vectors))
        if self.normalized:
            norms = np.linalg.norm(v, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise ValueError("normalized batch has rows without unit norm")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


@dataclass
class TrainState:
    """Model parameters partitioned into named groups plus training bookkeeping.

    ``params`` maps group name to a dict of named arrays. Optimizer moments are
    keyed ``"<group>/<param>/<moment>"`` in ``optimizer_state``.
    """

    params: dict
    config: object
    frozen: set = field(default_factory=lambda: set(PARAM_GROUPS))
    optimizer_state: dict = field(default_factory=dict)
    rng_seed: int = 0
    epoch: int = 0
    history: dict = field(default_factory=dict)

    def group_hash(self, group):
        h = hashlib.sha256()
        for name in sorted(self.params[group]):
            a = np.ascontiguousarray(self.params[group][name])
            h.update(name.encode())
            h.update(str(a.dtype).encode())
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()

    def group_hashes(self):
        return {g: self.group_hash(g) for g in self.params}

    def copy(self):
        return TrainState(
            params={g: {k: v.copy() for k, v in p.items()} for g, p in self.params.items()},
            config=self.config,
            frozen=set(self.frozen),
            optimizer_state={k: v.copy() for k, v in self.optimizer_state.items()},
            rng_seed=self.rng_seed,
            epoch=self.epoch,
            history={k: [dict(r) if isinstance(r, dict) else r for r in v]
                     for k, v in self.history.items()},
        )


def validate_sample(sample):
    """Return human-readable violations of the ``ImageSample`` invariants."""
    problems = []
    px = sample.pixels
    if px.ndim != 3:
        problems.append(f"pixels must be H x W x C, got {px.ndim} dims")
        return problems
    H, W, C = px.shape
    if H < MIN_SIDE or W < MIN_SIDE:
        problems.append("image too small")
    if C not in (1, 3):
        problems.append(f"channel count {C} not in {{1, 3}}")
    if px.size and (not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0):
        problems.append("pixel values outside [0, 1]")
    for i, (x, y) in enumerate(sample.dots):
        if not (0.0 <= x < W and 0.0 <= y < H):
            problems.append(f"dot {i} out of bounds")
    if sample.split not in SPLITS:
        problems.append(f"unknown split {sample.split!r}")
    if not sample.category.strip():
        problems.append("empty category")
    return problems


def check_split_disjointness(samples: Iterable[ImageSample]):
    """Return ``{category: sorted splits}`` for categories seen in more than one split."""
    seen = {}
    for s in samples:
        seen.setdefault(s.category.strip().lower(), set()).add(s.split)
    return {c: sorted(sp) for c, sp in seen.items() if len(sp) > 1}


def count_of(dmap):
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    if not np.all(np.isfinite(grid)):
        raise CorruptMapError("density map contains non-finite entries")
    return float(grid.sum())
