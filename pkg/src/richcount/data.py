"""Datasets, ground-truth density maps, synthetic shapes and text descriptions."""

from __future__ import annotations

import base64
import io
import json
import logging
import os
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .counter import CounterSample
from .domain import (
    SPLITS,
    DatasetError,
    DensityMap,
    ImageSample,
    PromptSet,
    check_split_disjointness,
    validate_sample,
)
from .nn import bilinear_matrix

log = logging.getLogger(__name__)

DEFAULT_SIGMA = 2.0
KERNEL_RADIUS = 3.0  # in units of sigma
DEFAULT_TEMPLATE = "Describe the {category} in this image."
MLLM_URL_ENV = "RICHCOUNT_MLLM_URL"
MLLM_KEY_ENV = "RICHCOUNT_MLLM_KEY"


# --- density maps ------------------------------------------------------------

def gt_density_from_dots(dots, H, W, sigma=DEFAULT_SIGMA):
    """Rasterize dot annotations into a density map whose sum is the dot count.

    Each dot gets a Gaussian evaluated at pixel centers, truncated at
    ``3 * sigma`` and at the image border, then renormalized to unit mass.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    bad = [i for i, (x, y) in enumerate(dots) if not (0 <= x < W and 0 <= y < H)]
    if bad:
        raise ValueError(f"dots out of bounds at indices {bad}")
    grid = np.zeros((H, W))
    r = int(np.ceil(KERNEL_RADIUS * sigma))
    for x, y in dots:
        cx, cy = int(x), int(y)
        x0, x1 = max(0, cx - r), min(W, cx + r + 1)
        y0, y1 = max(0, cy - r), min(H, cy + r + 1)
        xs = np.arange(x0, x1) + 0.5 - x
        ys = np.arange(y0, y1) + 0.5 - y
        k = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma ** 2))
        grid[y0:y1, x0:x1] += k / k.sum()
    return DensityMap(grid)


def area_matrix(n_out, n_in):
    """``(n_out, n_in)`` overlap matrix; every column sums to one, so mass is conserved."""
    M = np.zeros((n_out, n_in))
    s = n_in / n_out
    for i in range(n_out):
        lo, hi = i * s, (i + 1) * s
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            M[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return M


def resize_density(grid, H, W):
    """Resample a density grid to ``H x W`` keeping its total mass."""
    g = grid.grid if isinstance(grid, DensityMap) else np.asarray(grid, dtype=np.float64)
    out = area_matrix(H, g.shape[0]) @ g @ area_matrix(W, g.shape[1]).T
    total, new = g.sum(), out.sum()
    if new > 0:
        out *= total / new
    return out


def resize_image(pixels, H, W):
    px = np.asarray(pixels, dtype=np.float64)
    Uh, Uw = bilinear_matrix(H, px.shape[0]), bilinear_matrix(W, px.shape[1])
    out = np.einsum("lk,ikc->ilc", Uw, np.einsum("ij,jkc->ikc", Uh, px))
    return np.clip(out, 0.0, 1.0)


def resize_sample(sample, size, sigma=DEFAULT_SIGMA):
    """Resize an image to ``size x size`` and rasterize its dots at the new scale.

    Returns ``(pixels, dots, density)``; the density sums to the dot count.
    """
    H, W = sample.height, sample.width
    sx, sy = size / W, size / H
    dots = [(x * sx, y * sy) for x, y in sample.dots]
    px = sample.pixels if (H, W) == (size, size) else resize_image(sample.pixels, size, size)
    scaled_sigma = sigma * 0.5 * (sx + sy)
    return px, dots, gt_density_from_dots(dots, size, size, scaled_sigma)


def to_counter_samples(samples, prompts, size, sigma=DEFAULT_SIGMA):
    out = []
    for s in samples:
        px, _, dens = resize_sample(s, size, sigma)
        out.append(CounterSample(s.id, px, prompts[s.id], dens.grid))
    return out


# --- description augmentation -----------------------------------------------

def _category_pattern(category):
    words = [re.escape(w) for w in category.strip().split()]
    return re.compile(r"\b(" + r"\s+".join(words) + r")(es|s)?\b", re.IGNORECASE)


def category_present(t_d, category):
    return bool(category.strip()) and _category_pattern(category).search(t_d) is not None


def generalize_description(t_d, category):
    """Replace the category (singular, +s, +es) with "object"/"objects".

    Text without the category comes back unchanged; use
    :func:`category_present` to flag that case.
    """
    if not category.strip():
        return t_d
    # a category already given in plural ("sea shells") stays plural
    plural_category = category.strip().lower().endswith("s")
    return _category_pattern(category).sub(
        lambda m: "objects" if m.group(2) or plural_category else "object", t_d)


@dataclass(frozen=True)
class DescriptionRequest:
    image_id: str
    category: str
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if "{category}" not in self.template:
            raise ValueError("template needs a {category} placeholder")

    def render(self):
        return self.template.format(category=self.category)


class ReplayCache:
    """JSON file of earlier MLLM outputs: ``{id: {t_p, t_d, t_d_prime, model_name}}``."""

    def __init__(self, path=None, entries=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if entries is not None:
            self.entries = dict(entries)
        elif self.path and self.path.exists():
            self.entries = json.loads(self.path.read_text())
        else:
            self.entries = {}

    def get(self, image_id):
        e = self.entries.get(image_id)
        if e is None or not e.get("t_d"):
            return None
        return e

    def put(self, image_id, t_p, t_d, t_d_prime, model_name):
        with self._lock:
            self.entries[image_id] = {"t_p": t_p, "t_d": t_d, "t_d_prime": t_d_prime,
                                      "model_name": model_name}
            if self.path:
                self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True))


class HttpDescriptionClient:
    """Generic MLLM endpoint.

    POSTs ``{"model", "prompt", "image_id", "image_base64"}`` as JSON and
    expects ``{"description": str}`` back.
    """

    def __init__(self, url, api_key=None, model_name="mllm", timeout=60.0):
        self.url = url
        self.api_key = api_key
        self.model_name = model_name
        self.timeout = timeout

    @classmethod
    def from_env(cls, model_name="mllm"):
        url = os.environ.get(MLLM_URL_ENV)
        if not url:
            raise RuntimeError(f"{MLLM_URL_ENV} is not set")
        return cls(url, os.environ.get(MLLM_KEY_ENV), model_name)

    def describe(self, request, image_png=None):
        body = {"model": self.model_name, "prompt": request.render(), "image_id": request.image_id,
                "image_base64": base64.b64encode(image_png).decode("ascii") if image_png else None}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        text = payload.get("description", "")
        if not text.strip():
            raise ValueError("endpoint returned an empty description")
        return text


class DescriptionError(Exception):
    def __init__(self, errors, results):
        super().__init__(f"{len(errors)} description(s) unavailable: "
                         + "; ".join(f"{k}: {v}" for k, v in errors.items()))
        self.errors = errors
        self.results = results


def fetch_descriptions(requests, client, allow_network=False, cache=None, images=None):
    """Resolve descriptions cache-first.

    ``client`` is a :class:`ReplayCache` or an HTTP client with a
    ``describe(request, image_png)`` method. With an HTTP client, ``cache``
    (if given) is consulted first and live calls happen only when
    ``allow_network`` is set; fresh answers are written back to the cache.
    Raises :class:`DescriptionError` listing every id that could not be
    resolved.
    """
    if isinstance(client, ReplayCache):
        cache, client = client, None
    results, errors = {}, {}
    for req in requests:
        hit = cache.get(req.image_id) if cache is not None else None
        if hit is not None:
            t_d = hit["t_d"]
            model_name = hit.get("model_name", "")
        elif client is None or not allow_network:
            errors[req.image_id] = "no cached description"
            continue
        else:
            png = images.get(req.image_id) if images else None
            try:
                t_d = client.describe(req, png)
            except Exception as exc:  # network errors are per-id, not fatal
                errors[req.image_id] = f"request failed: {exc}"
                continue
            model_name = getattr(client, "model_name", "")
        generalized = (hit or {}).get("t_d_prime") or generalize_description(t_d, req.category)
        flagged = not category_present(t_d, req.category)
        results[req.image_id] = PromptSet(req.category, t_d, generalized, flagged=flagged)
        if hit is None and cache is not None:
            cache.put(req.image_id, req.category, t_d, generalized, model_name)
    if errors:
        raise DescriptionError(errors, results)
    return results


# --- manifest layout ---------------------------------------------------------

def load_image(path):
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    px = np.asarray(img, dtype=np.float64) / 255.0
    if px.ndim == 2:
        px = px[..., None]
    return px


def _png_bytes(pixels):
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_manifest(root, samples, prompts, model_name="template"):
    """Write samples in the FSC-147-style layout read by :func:`load_manifest`."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ann, splits, classes, desc = {}, {s: [] for s in SPLITS}, [], {}
    for s in samples:
        (root / "images" / s.id).write_bytes(_png_bytes(s.pixels))
        ann[s.id] = {"points": [[x, y] for x, y in s.dots]}
        splits[s.split].append(s.id)
        classes.append(f"{s.id}\t{s.category}")
        p = prompts.get(s.id)
        if p is not None and p.t_d:
            desc[s.id] = {"t_p": p.t_p, "t_d": p.t_d, "t_d_prime": p.t_d_prime, "model_name": model_name}
    (root / "annotations.json").write_text(json.dumps(ann, indent=1, sort_keys=True))
    (root / "splits.json").write_text(json.dumps(splits, indent=1, sort_keys=True))
    (root / "classes.txt").write_text("\n".join(classes) + "\n")
    if desc:
        (root / "descriptions.json").write_text(json.dumps(desc, indent=1, sort_keys=True))


def _read_json(path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file {path.name}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {path.name}: {exc}") from None


def load_manifest(root):
    """Load and validate a dataset directory.

    Returns ``(samples, prompts)`` with ``prompts`` keyed by image id. Images
    without descriptions get a category-only :class:`PromptSet` marked
    ``flagged``. Any invariant violation raises :class:`DatasetError` naming
    the offending ids; nothing is returned partially.
    """
    root = Path(root)
    ann = _read_json(root / "annotations.json")
    split_ids = _read_json(root / "splits.json")
    try:
        lines = (root / "classes.txt").read_text().splitlines()
    except FileNotFoundError:
        raise DatasetError("missing file classes.txt") from None
    classes = {}
    for line in lines:
        if line.strip():
            k, _, c = line.partition("\t")
            classes[k.strip()] = c.strip()
    desc_path = root / "descriptions.json"
    descs = _read_json(desc_path) if desc_path.exists() else {}

    split_of = {}
    for split, ids in split_ids.items():
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r} in splits.json")
        for i in ids:
            if i in split_of:
                raise DatasetError(f"id listed in two splits: {i}", [i])
            split_of[i] = split
    dangling = sorted(i for i in split_of
                      if i not in ann or i not in classes or not (root / "images" / i).is_file())
    if dangling:
        raise DatasetError(f"ids without annotation, class or image: {dangling}", dangling)

    samples, prompts, invalid = [], {}, {}
    for i in sorted(split_of):
        s = ImageSample(i, load_image(root / "images" / i), classes[i],
                        [tuple(p) for p in ann[i]["points"]], split_of[i])
        problems = validate_sample(s)
        if problems:
            invalid[i] = problems
            continue
        samples.append(s)
        d = descs.get(i)
        if d and d.get("t_d"):
            t_dp = d.get("t_d_prime") or generalize_description(d["t_d"], s.category)
            prompts[i] = PromptSet(s.category, d["t_d"], t_dp, flagged=not category_present(d["t_d"], s.category))
        else:
            prompts[i] = PromptSet(s.category, "", "", flagged=True)
    if invalid:
        msg = "; ".join(f"{i}: {', '.join(p)}" for i, p in invalid.items())
        raise DatasetError(f"invalid samples: {msg}", list(invalid))
    overlap = check_split_disjointness(samples)
    if overlap:
        ids = [s.id for s in samples if s.category.strip().lower() in overlap]
        raise DatasetError(f"categories shared across splits: {overlap}", ids)
    return samples, prompts


# --- synthetic shapes --------------------------------------------------------

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.1, 0.85, 0.9),
    "orange": (1.0, 0.55, 0.05),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("disc", "square", "triangle")


@dataclass(frozen=True)
class SynthConfig:
    canvas_size: int = 64
    count_range: tuple = (1, 20)
    shapes: tuple = SHAPES
    colors: tuple = tuple(COLORS)
    distractor_range: tuple = (0, 3)
    radius_range: tuple = (2.5, 4.0)
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 1 or hi < lo:
            raise ValueError("count range must satisfy 1 <= lo <= hi")
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be >= 16")
        unknown = [c for c in self.colors if c not in COLORS] + [s for s in self.shapes if s not in SHAPES]
        if unknown:
            raise ValueError(f"unknown colors/shapes {unknown}")


@dataclass
class SyntheticDataset:
    samples: list
    prompts: dict
    config: SynthConfig = field(default_factory=SynthConfig)

    def split(self, name):
        return [s for s in self.samples if s.split == name]


def synthetic_prompts(color, shape):
    t_p = f"{color} {shape}"
    t_d = f"a photo containing {color} {shape}s of varying size"
    return PromptSet(t_p, t_d, generalize_description(t_d, t_p))


def category_splits(config):
    """Assign every color/shape pair to one split; each split gets a mix of both."""
    cats = [(c, s) for s in config.shapes for c in config.colors]
    rng = np.random.default_rng([config.seed, 17])
    order = rng.permutation(len(cats))
    n = len(cats)
    n_train = max(1, int(round(config.split_fractions[0] * n)))
    n_val = max(1, int(round(config.split_fractions[1] * n)))
    if n_train + n_val >= n:
        raise ValueError("too few color/shape pairs for three disjoint splits")
    out = {"train": [], "val": [], "test": []}
    for rank, k in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out[split].append(cats[k])
    return out


def _shape_mask(shape, cx, cy, r, yy, xx):
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        h = 0.85 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    # upward triangle inscribed in the radius box
    t = (dy + r) / (2.0 * r)
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t * r)


def _place(rng, n, size, r_lo, r_hi):
    radius = r_hi
    while True:
        placed = []
        attempts = 0
        while len(placed) < n and attempts < 4000:
            attempts += 1
            r = rng.uniform(r_lo, radius)
            cx, cy = rng.uniform(r, size - r, size=2)
            if all((cx - x) ** 2 + (cy - y) ** 2 > (r + q + 1.0) ** 2 for x, y, q in placed):
                placed.append((cx, cy, r))
        if len(placed) == n:
            return placed
        radius = max(r_lo * 0.5, radius * 0.85)
        r_lo = min(r_lo, radius)


def render_synthetic_image(rng, size, targets, distractors, r_lo, r_hi):
    """Draw shapes on a noisy gray canvas; returns pixels and target centers."""
    objects = [(c, s, True) for c, s in targets] + [(c, s, False) for c, s in distractors]
    order = rng.permutation(len(objects))
    objects = [objects[k] for k in order]
    spots = _place(rng, len(objects), size, r_lo, r_hi)
    bg = rng.uniform(0.1, 0.3)
    px = np.clip(bg + 0.03 * rng.normal(size=(size, size, 1)), 0.0, 1.0) * np.ones((1, 1, 3))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dots = []
    for (color, shape, is_target), (cx, cy, r) in zip(objects, spots):
        rgb = np.clip(np.array(COLORS[color]) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        px[_shape_mask(shape, cx, cy, r, yy, xx)] = rgb
        if is_target:
            dots.append((float(cx), float(cy)))
    px = np.round(px * 255.0) / 255.0
    return px, dots


def generate_synthetic(config, n):
    """Generate ``n`` images of colored shapes with disjoint category splits.

    Each image has a target category (color and shape) counted by its dots,
    plus distractors drawn from other categories of the same split.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(config.seed)
    pools = category_splits(config)
    fractions = np.array(config.split_fractions, dtype=np.float64)
    fractions /= fractions.sum()
    samples, prompts = [], {}
    for k in range(n):
        split = SPLITS[int(rng.choice(3, p=fractions))]
        pool = pools[split]
        color, shape = pool[int(rng.integers(len(pool)))]
        count = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
        others = [c for c in pool if c != (color, shape)]
        n_dis = int(rng.integers(config.distractor_range[0], config.distractor_range[1] + 1)) if others else 0
        distractors = [others[int(rng.integers(len(others)))] for _ in range(n_dis)]
        px, dots = render_synthetic_image(rng, config.canvas_size, [(color, shape)] * count,
                                          distractors, *config.radius_range)
        sid = f"{k:05d}.png"
        prompt = synthetic_prompts(color, shape)
        samples.append(ImageSample(sid, px, prompt.t_p, dots, split))
        prompts[sid] = prompt
    return SyntheticDataset(samples, prompts, config)
