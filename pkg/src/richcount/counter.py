"""Stage-2 counter: cross-attention fusion, density decoder and losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .domain import PARAM_GROUPS, PROMPT_VARIANTS, ConfigurationError, DensityMap, FrozenParameterError

log = logging.getLogger(__name__)

GT_TERMS = ("t_g", "d_g", "dp_g")
PAIR_TERMS = ("t_d", "t_dp", "d_dp")
LOSS_TERMS = GT_TERMS + PAIR_TERMS
# variant index pairs for each loss term; index 3 is the ground truth
_TERM_MAPS = {"t_g": (0, 3), "d_g": (1, 3), "dp_g": (2, 3), "t_d": (0, 1), "t_dp": (0, 2), "d_dp": (1, 2)}
STAGE2_FROZEN = frozenset({"backbone_visual", "backbone_text", "ffn", "adapter"})


class InteractionModule:
    """Stacked multi-head cross-attention; visual tokens query text keys/values.

    Each layer adds its attention output to the running visual tokens. There is
    no output projection, so with a single text vector every query receives
    exactly ``W_v @ e_txt``.
    """

    def __init__(self, params, heads=4, layers=None):
        self.params = params
        self.heads = heads
        self.layers = layers if layers is not None else len([k for k in params if k.endswith(".q.weight")])

    @classmethod
    def from_state(cls, state):
        return cls(state.params["fusion"], state.config.fusion_heads, state.config.fusion_layers)

    @property
    def d(self):
        return self.params["l0.q.weight"].shape[0]

    @staticmethod
    def init_params(rng, d, layers):
        p = {}
        for i in range(layers):
            for name in ("q", "k", "v"):
                p[f"l{i}.{name}.weight"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        return p

    def forward(self, x, t):
        caches = []
        for i in range(self.layers):
            p = self.params
            a, c = nn.attention_forward(x, t, p[f"l{i}.q.weight"], p[f"l{i}.k.weight"],
                                        p[f"l{i}.v.weight"], self.heads)
            x = x + a
            caches.append(c)
        return x, caches

    def backward(self, caches, grad_out):
        grads = {}
        gx = grad_out
        gt = 0.0
        for i in reversed(range(self.layers)):
            p = self.params
            dx, dt, grads[f"l{i}.q.weight"], grads[f"l{i}.k.weight"], grads[f"l{i}.v.weight"] = \
                nn.attention_backward(caches[i], gx, p[f"l{i}.q.weight"], p[f"l{i}.k.weight"],
                                      p[f"l{i}.v.weight"])
            gx = gx + dx
            gt = gt + dt
        return gx, gt, grads


def fuse(visual_tokens, text_embedding, module):
    """Fuse ``(N, d)`` visual tokens with a ``d`` or ``(K, d)`` text embedding."""
    x = np.asarray(visual_tokens, dtype=np.float64)
    t = np.atleast_2d(np.asarray(text_embedding, dtype=np.float64))
    if x.shape[-1] != module.d or t.shape[-1] != module.d:
        raise ConfigurationError(
            f"fusion width {module.d} does not match visual {x.shape[-1]} / text {t.shape[-1]}")
    squeeze = x.ndim == 2
    if squeeze:
        x, t = x[None], t[None]
    out, _ = module.forward(x, t)
    return out[0] if squeeze else out


class DensityDecoder:
    """Per-token MLP to one value per patch, bilinear upsampling, then ReLU.

    The rectified map is multiplied by a fixed positive ``scale`` so the
    network works in units of roughly one object per patch rather than per
    pixel.
    """

    def __init__(self, params, depth=None, scale=1.0):
        self.params = params
        self.depth = depth if depth is not None else len([k for k in params if k.endswith(".weight")])
        self.scale = scale

    @classmethod
    def from_state(cls, state):
        cfg = state.config
        return cls(state.params["decoder"], cfg.decoder_depth, 1.0 / cfg.patch_size ** 2)

    @staticmethod
    def init_params(rng, d, hidden, depth, final_bias=0.1):
        dims = [d] + [hidden] * (depth - 1) + [1]
        p = {}
        for i in range(depth):
            fan_in, fan_out = dims[i], dims[i + 1]
            std = np.sqrt(2.0 / fan_in) if i < depth - 1 else 0.1 / np.sqrt(fan_in)
            p[f"l{i}.weight"] = rng.normal(0.0, std, size=(fan_out, fan_in))
            p[f"l{i}.bias"] = np.zeros(fan_out)
        p[f"l{depth - 1}.bias"][:] = final_bias
        return p

    def forward(self, fused, grid, out_hw):
        p = self.params
        B, N, _ = fused.shape
        h = fused
        caches = []
        for i in range(self.depth):
            h, c_lin = nn.linear_forward(h, p[f"l{i}.weight"], p[f"l{i}.bias"])
            c_relu = None
            if i < self.depth - 1:
                h, c_relu = nn.relu_forward(h)
            caches.append((c_lin, c_relu))
        g = h.reshape(B, *grid)
        Uh = nn.bilinear_matrix(out_hw[0], grid[0])
        Uw = nn.bilinear_matrix(out_hw[1], grid[1])
        up = Uh @ g @ Uw.T
        dens, mask = nn.relu_forward(up)
        return dens * self.scale, (caches, mask, Uh, Uw, (B, N))

    def backward(self, cache, grad_maps):
        caches, mask, Uh, Uw, (B, N) = cache
        p = self.params
        g = nn.relu_backward(mask, grad_maps * self.scale)
        g = (Uh.T @ g @ Uw).reshape(B, N, 1)
        grads = {}
        for i in reversed(range(self.depth)):
            c_lin, c_relu = caches[i]
            if c_relu is not None:
                g = nn.relu_backward(c_relu, g)
            g, grads[f"l{i}.weight"], grads[f"l{i}.bias"] = nn.linear_backward(c_lin, g, p[f"l{i}.weight"])
        return g, grads


@dataclass(frozen=True)
class CounterConfig:
    consistency: bool = True
    weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        w = {k: 1.0 for k in LOSS_TERMS}
        w.update(self.weights)
        unknown = set(w) - set(LOSS_TERMS)
        if unknown:
            raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
        if any(v < 0 for v in w.values()):
            raise ConfigurationError("loss weights must be >= 0")
        object.__setattr__(self, "weights", w)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")

    def effective_weights(self):
        w = dict(self.weights)
        if not self.consistency:
            for k in PAIR_TERMS:
                w[k] = 0.0
        return w


def _grid(x):
    return x.grid if isinstance(x, DensityMap) else np.asarray(x, dtype=np.float64)


def density_loss(a, b):
    """Mean squared difference between two equally shaped density maps."""
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ValueError(f"density map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _resolve_weights(weights):
    if weights is None:
        return {k: 1.0 for k in LOSS_TERMS}
    if isinstance(weights, CounterConfig):
        return weights.effective_weights()
    w = {k: 1.0 for k in LOSS_TERMS}
    w.update(weights)
    return w


def total_loss(d_t, d_d, d_dp, d_g, weights=None):
    """Ground-truth terms plus pairwise consistency terms.

    ``weights`` is a per-term dict (keys ``LOSS_TERMS``) or a
    :class:`CounterConfig`. Returns ``(total, breakdown)`` where the breakdown
    holds each weighted term.
    """
    maps = [_grid(m) for m in (d_t, d_d, d_dp, d_g)]
    if len({m.shape for m in maps}) != 1:
        raise ValueError(f"density map shapes differ: {[m.shape for m in maps]}")
    w = _resolve_weights(weights)
    breakdown = {k: w[k] * density_loss(maps[i], maps[j]) for k, (i, j) in _TERM_MAPS.items()}
    return float(sum(breakdown.values())), breakdown


def batched_total_loss(preds, gt, weights):
    """Batch-mean total loss for ``preds`` of shape ``(3, B, H, W)``.

    Returns ``(loss, raw_terms, grad_preds)``; raw terms are unweighted batch means.
    """
    B, H, W = gt.shape
    maps = [preds[0], preds[1], preds[2], gt]
    grad = np.zeros_like(preds)
    raw = {}
    loss = 0.0
    hw = float(H * W)
    for k, (i, j) in _TERM_MAPS.items():
        diff = maps[i] - maps[j]
        raw[k] = float((diff ** 2).sum() / (hw * B))
        loss += weights[k] * raw[k]
        g = weights[k] * 2.0 * diff / (hw * B)
        grad[i] += g
        if j < 3:
            grad[j] -= g
    return loss, raw, grad


def stage2_forward(state, tokens, texts, grid, out_hw):
    """Density maps for token grids ``(B, N, d)`` and text embeddings ``(B, d)`` or ``(B, K, d)``."""
    fusion = InteractionModule.from_state(state)
    decoder = DensityDecoder.from_state(state)
    t = texts[:, None, :] if texts.ndim == 2 else texts
    fused, fcache = fusion.forward(tokens, t)
    maps, dcache = decoder.forward(fused, grid, out_hw)
    return maps, (fusion, decoder, fcache, dcache)


def stage2_loss(state, tokens, texts, gt, grid, weights):
    """Total loss and fusion/decoder gradients for one batch.

    ``tokens`` is ``(B, N, d)``; ``texts`` is ``(3, B, d)`` in the order
    category, description, generalized; ``gt`` is ``(B, H, W)``.
    """
    B = tokens.shape[0]
    x = np.concatenate([tokens] * 3, axis=0)
    t = texts.reshape(3 * B, -1)
    maps, (fusion, decoder, fcache, dcache) = stage2_forward(state, x, t, grid, gt.shape[1:])
    preds = maps.reshape(3, B, *gt.shape[1:])
    loss, raw, gpred = batched_total_loss(preds, gt, weights)
    gfused, gdec = decoder.backward(dcache, gpred.reshape(3 * B, *gt.shape[1:]))
    _, _, gfus = fusion.backward(fcache, gfused)
    return loss, raw, {"fusion": gfus, "decoder": gdec}


def model_inputs(state, pixels):
    """Frozen visual tokens and patch grid for one image at model resolution.

    Tokens are unit-normalized per position when the model normalizes
    embeddings, which keeps the fusion input scale independent of the FFN.
    """
    from .encoders import BackbonePair, FfnHead, encode_visual
    backbone = BackbonePair.from_state(state)
    tokens, _ = encode_visual(backbone, FfnHead.from_state(state), pixels, normalize=state.config.normalize)
    if state.config.normalize:
        tokens, _ = nn.l2_normalize_forward(tokens)
    _, grid = backbone.patchify(pixels)
    return tokens, grid


def text_embedding(state, prompt):
    from .encoders import AdapterHead, BackbonePair, encode_text
    return encode_text(BackbonePair.from_state(state), AdapterHead.from_state(state), prompt,
                       normalize=state.config.normalize)


def forward(image, prompt, state):
    """Predict a density map for ``image`` (``H x W x C`` in [0, 1]) and a text prompt.

    The image is resized to the model resolution; the map is resized back to
    the input resolution with its total mass preserved.
    """
    from .data import resize_density, resize_image
    if not prompt or not prompt.strip():
        raise ValueError("prompt is empty")
    pixels = np.asarray(image, dtype=np.float64)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    size = state.config.image_size
    H, W = pixels.shape[:2]
    model_px = pixels if (H, W) == (size, size) else resize_image(pixels, size, size)
    tokens, grid = model_inputs(state, model_px)
    text = text_embedding(state, prompt)
    maps, _ = stage2_forward(state, tokens[None], text[None], grid, (size, size))
    grid_out = maps[0]
    if (H, W) != (size, size):
        grid_out = resize_density(grid_out, H, W)
    return DensityMap(grid_out)


@dataclass
class CounterSample:
    """Training example at model resolution."""

    id: str
    pixels: np.ndarray
    prompts: object
    density: np.ndarray

    @property
    def count(self):
        return float(self.density.sum())


def encode_counter_dataset(state, dataset, variants=PROMPT_VARIANTS):
    """Precompute frozen tokens and text embeddings.

    Returns ``(tokens, texts, gt, grid, kept_ids, skipped_ids)`` where ``texts``
    is ``(3, B, d)``. Samples missing any prompt variant are skipped.
    """
    kept, skipped = [], []
    for s in dataset:
        (kept if all(s.prompts.variant(v) for v in variants) else skipped).append(s)
    if not kept:
        return None, None, None, None, [], [s.id for s in skipped]
    toks, grid = [], None
    for s in kept:
        t, grid = model_inputs(state, s.pixels)
        toks.append(t)
    cache = {}
    texts = np.zeros((3, len(kept), state.config.d))
    for k, s in enumerate(kept):
        for vi, v in enumerate(variants):
            p = s.prompts.variant(v)
            if p not in cache:
                cache[p] = text_embedding(state, p)
            texts[vi, k] = cache[p]
    gt = np.stack([s.density for s in kept])
    return np.stack(toks), texts, gt, grid, [s.id for s in kept], [s.id for s in skipped]


def train_counter(state, dataset, config):
    """Train fusion and decoder with the encoders frozen.

    Each step runs the model once per prompt variant and minimizes the total
    loss. Per-epoch means of the total and of each raw term are appended to
    ``history["counter"]``.
    """
    if config.epochs == 0:
        return state.copy()
    new = state.copy()
    new.frozen = set(STAGE2_FROZEN)
    before = new.group_hashes()
    tokens, texts, gt, grid, kept, skipped = encode_counter_dataset(new, dataset)
    new.history["counter_skipped"] = list(skipped)
    if skipped:
        log.warning("skipped %d samples with missing prompt variants", len(skipped))
    if not kept:
        raise ValueError("no trainable samples (all are missing prompt variants)")
    weights = config.effective_weights()
    opt = nn.make_optimizer(config.optimizer, config.lr)
    rng = np.random.default_rng([config.seed, 3])
    hist = new.history.setdefault("counter", [])
    n = tokens.shape[0]
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        sums = {k: 0.0 for k in LOSS_TERMS}
        total, seen = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            loss, raw, grads = stage2_loss(new, tokens[idx], texts[:, idx], gt[idx], grid, weights)
            for group in ("fusion", "decoder"):
                opt.step(new.params[group], grads[group], new.optimizer_state, group)
            total += loss * len(idx)
            for k in LOSS_TERMS:
                sums[k] += raw[k] * len(idx)
            seen += len(idx)
        row = {"epoch": new.epoch, "total": total / seen}
        row.update({k: sums[k] / seen for k in LOSS_TERMS})
        row.update({f"w_{k}": weights[k] * sums[k] / seen for k in LOSS_TERMS})
        hist.append(row)
        new.epoch += 1
    after = new.group_hashes()
    changed = [g for g in STAGE2_FROZEN if before[g] != after[g]]
    if changed:
        raise FrozenParameterError(f"frozen parameter groups changed: {changed}")
    return new


def trainable_groups():
    return [g for g in PARAM_GROUPS if g not in STAGE2_FROZEN]
