"""Stage-1 visual/text alignment with a margin contrastive loss.

Phase A trains the visual FFN head against plain backbone text embeddings;
phase B freezes the head and trains the text adapter. Both phases only see
pooled image embeddings, so training runs on precomputed backbone outputs
(:class:`AlignmentData`) and never touches the backbones themselves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .domain import PARAM_GROUPS, PROMPT_VARIANTS, ConfigurationError, EmbeddingBatch, FrozenParameterError
from .encoders import AdapterHead, BackbonePair, FfnHead

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    negatives_per_anchor: int | None = None  # None: every other in-batch category
    batch_size: int = 64
    epochs: int = 10
    lr: float = 1e-3
    momentum: float = 0.9
    seed: int = 0
    variants: tuple = PROMPT_VARIANTS

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.negatives_per_anchor is not None and self.negatives_per_anchor < 1:
            raise ConfigurationError("negatives_per_anchor must be >= 1")
        bad = set(self.variants) - set(PROMPT_VARIANTS)
        if bad or not self.variants:
            raise ConfigurationError(f"invalid prompt variants {sorted(bad)}")


@dataclass
class AlignmentData:
    """Backbone outputs for alignment training.

    ``visual`` holds pooled visual backbone embeddings ``(N, d)``. For each
    prompt variant, ``texts[variant]`` is an ``(N, d)`` array of backbone text
    embeddings and ``prompts[variant]`` the matching strings (``""`` marks a
    missing prompt; its row is ignored).
    """

    visual: np.ndarray
    categories: list
    texts: dict
    prompts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.visual = np.asarray(self.visual, dtype=np.float64)
        n, d = self.visual.shape
        if len(self.categories) != n:
            raise ValueError("categories length does not match visual rows")
        for v, arr in self.texts.items():
            if arr.shape != (n, d):
                raise ConfigurationError(f"text variant {v} has shape {arr.shape}, expected {(n, d)}")
            self.prompts.setdefault(v, [f"{v}:{c}" for c in self.categories])

    def __len__(self):
        return self.visual.shape[0]

    @property
    def d(self):
        return self.visual.shape[1]

    def has(self, variant, i):
        return variant in self.texts and bool(self.prompts[variant][i])

    def subset(self, idx):
        idx = np.asarray(idx)
        return AlignmentData(
            self.visual[idx], [self.categories[i] for i in idx],
            {v: a[idx] for v, a in self.texts.items()},
            {v: [p[i] for i in idx] for v, p in self.prompts.items()})


@dataclass
class PairBatch:
    """Image/text pairs stored by index.

    Pair ``k`` compares ``anchors[anchor_index[k]]`` with
    ``texts[text_index[k]]``; ``labels[k]`` is 1 for a matching category.
    """

    anchors: np.ndarray
    texts: np.ndarray
    anchor_index: np.ndarray
    text_index: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.labels.size

    @property
    def positives(self):
        m = self.labels == 1
        return EmbeddingBatch(self.texts[self.text_index[m]])

    @property
    def negatives(self):
        m = self.labels == 0
        return EmbeddingBatch(self.texts[self.text_index[m]])


def contrastive_loss(batch, m):
    """Margin contrastive loss and its gradients w.r.t. anchors and texts.

    Returns ``(loss, grad_anchors, grad_texts)``.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if not m > 0:
        raise ConfigurationError(f"margin must be > 0, got {m}")
    diff = batch.anchors[batch.anchor_index] - batch.texts[batch.text_index]
    dist = np.sqrt((diff * diff).sum(axis=1))
    y = batch.labels.astype(np.float64)
    hinge = np.maximum(0.0, m - dist)
    loss = float((y * dist ** 2 + (1.0 - y) * hinge ** 2).sum() / (2.0 * n))
    safe = np.where(dist > 0, dist, 1.0)
    coef = y * 2.0 + (1.0 - y) * np.where(dist > 0, -2.0 * hinge / safe, 0.0)
    gdiff = (coef / (2.0 * n))[:, None] * diff
    ga = np.zeros_like(batch.anchors)
    gt = np.zeros_like(batch.texts)
    np.add.at(ga, batch.anchor_index, gdiff)
    np.add.at(gt, batch.text_index, -gdiff)
    return loss, ga, gt


def pair_indices(categories, text_categories, text_vectors, negatives_per_anchor=None, rng=None):
    """Index triples for anchors with the given categories against one text per category."""
    pos_of = {c: i for i, c in enumerate(text_categories)}
    ai, ti, y = [], [], []
    for a, c in enumerate(categories):
        p = pos_of[c]
        ai.append(a), ti.append(p), y.append(1)
        negs = [j for j, cj in enumerate(text_categories)
                if cj != c and not np.array_equal(text_vectors[j], text_vectors[p])]
        if negatives_per_anchor is not None and len(negs) > negatives_per_anchor:
            rng = rng if rng is not None else np.random.default_rng(0)
            negs = sorted(rng.choice(negs, size=negatives_per_anchor, replace=False).tolist())
        for j in negs:
            ai.append(a), ti.append(j), y.append(0)
    return np.array(ai, dtype=int), np.array(ti, dtype=int), np.array(y, dtype=int)


def build_pairs(samples, texts, config=None, rng=None):
    """Pair each visual anchor with its own category's text and with every other in-batch category.

    ``samples`` is a list of ``(visual_embedding, category)``; ``texts`` maps
    category to its text embedding. A negative whose embedding equals the
    anchor's positive embedding is dropped, since it would carry both labels.
    """
    config = config or ContrastiveConfig()
    cats = [c for _, c in samples]
    order = list(dict.fromkeys(cats))
    if len(order) < 2:
        raise ValueError("batch must contain at least 2 distinct categories (no negatives available)")
    missing = [c for c in order if c not in texts]
    if missing:
        raise KeyError(f"no text embedding for categories {missing}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    anchors = np.stack([np.asarray(v, dtype=np.float64) for v, _ in samples])
    tvec = np.stack([np.asarray(texts[c], dtype=np.float64) for c in order])
    ai, ti, y = pair_indices(cats, order, tvec, config.negatives_per_anchor, rng)
    return PairBatch(anchors, tvec, ai, ti, y)


def _batch_texts(data, idx, variants):
    """Representative text rows per (variant, category) for a minibatch.

    Returns the raw text matrix plus per-variant (anchor rows, categories,
    text row offsets) used to assemble pair indices.
    """
    rows, plan = [], []
    for v in variants:
        if v not in data.texts:
            continue
        members = [k for k, i in enumerate(idx) if data.has(v, i)]
        if not members:
            continue
        first = {}
        for k in members:
            first.setdefault(data.categories[idx[k]], idx[k])
        cats = list(first)
        offset = len(rows)
        rows.extend(data.texts[v][first[c]] for c in cats)
        plan.append((members, cats, offset))
    return (np.stack(rows) if rows else np.zeros((0, data.d))), plan


def _assemble_pairs(data, idx, anchors, texts, plan, config, rng):
    ai, ti, y = [], [], []
    for members, cats, offset in plan:
        if len(cats) < 2:
            continue
        a_cats = [data.categories[idx[k]] for k in members]
        a, t, lab = pair_indices(a_cats, cats, texts[offset:offset + len(cats)],
                                 config.negatives_per_anchor, rng)
        ai.append(np.asarray(members)[a]), ti.append(t + offset), y.append(lab)
    if not ai:
        return None
    return PairBatch(anchors, texts, np.concatenate(ai), np.concatenate(ti), np.concatenate(y))


def _check_frozen(before, after, active):
    changed = [g for g in before if g != active and before[g] != after[g]]
    if changed:
        raise FrozenParameterError(f"frozen parameter groups changed: {changed}")


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def stage1_ffn_loss(ffn, data, idx, config, rng=None):
    """Loss and FFN gradients for one phase-A minibatch (BN in training mode)."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    texts, plan = _batch_texts(data, idx, config.variants)
    texts, _ = nn.l2_normalize_forward(texts)
    out, cache = ffn.forward(data.visual[idx], train=True)
    anchors, ncache = nn.l2_normalize_forward(out)
    pairs = _assemble_pairs(data, idx, anchors, texts, plan, config, rng)
    if pairs is None:
        return None, {}
    loss, ga, _ = contrastive_loss(pairs, config.margin)
    _, grads = ffn.backward(cache, nn.l2_normalize_backward(ncache, ga))
    return loss, grads


def stage1_adapter_loss(adapter, anchors, data, idx, config, rng=None):
    """Loss and adapter gradients for one phase-B minibatch; ``anchors`` are fixed unit vectors."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    raw, plan = _batch_texts(data, idx, config.variants)
    out, cache = adapter.forward(raw)
    texts, ncache = nn.l2_normalize_forward(out)
    pairs = _assemble_pairs(data, idx, anchors[idx], texts, plan, config, rng)
    if pairs is None:
        return None, {}
    loss, _, gt = contrastive_loss(pairs, config.margin)
    _, grads = adapter.backward(cache, nn.l2_normalize_backward(ncache, gt))
    return loss, grads


def _run_phase(state, data, config, active, history_key, step_fn):
    if data.d != state.config.d:
        raise ConfigurationError(f"data width {data.d} != model width {state.config.d}")
    if config.epochs == 0:
        return state.copy()
    new = state.copy()
    new.frozen = set(PARAM_GROUPS) - {active}
    before = new.group_hashes()
    opt = nn.SGD(lr=config.lr, momentum=config.momentum)
    rng = np.random.default_rng([config.seed, 1 if active == "ffn" else 2])
    losses = new.history.setdefault(history_key, [])
    for _ in range(config.epochs):
        total, steps = 0.0, 0
        for idx in _batches(len(data), config.batch_size, rng):
            if len(idx) < 2 or len({data.categories[i] for i in idx}) < 2:
                continue
            loss, grads = step_fn(new, idx, rng)
            if loss is None:
                continue
            opt.step(new.params[active], grads, new.optimizer_state, active)
            total += loss
            steps += 1
        losses.append(total / steps if steps else float("nan"))
        new.epoch += 1
    _check_frozen(before, new.group_hashes(), active)
    return new


def _require_negatives(data):
    if len(set(data.categories)) < 2:
        raise ValueError("alignment data has a single category: no negatives available")


def train_ffn_phase(state, data, config):
    """Phase A: train only the visual FFN head; text side is the raw backbone."""
    _require_negatives(data)
    ffn = FfnHead.from_state

    def step(st, idx, rng):
        return stage1_ffn_loss(ffn(st), data, idx, config, rng)

    return _run_phase(state, data, config, "ffn", "align_ffn", step)


def visual_anchors(state, visual):
    """Frozen ``f_v`` outputs (evaluation-mode FFN, unit norm) for pooled backbone vectors."""
    out, _ = FfnHead.from_state(state).forward(np.asarray(visual, dtype=np.float64), train=False)
    return nn.l2_normalize_forward(out)[0]


def train_adapter_phase(state, data, config):
    """Phase B: train only the text adapter against the frozen visual head."""
    _require_negatives(data)
    anchors = visual_anchors(state, data.visual)

    def step(st, idx, rng):
        return stage1_adapter_loss(AdapterHead.from_state(st), anchors, data, idx, config, rng)

    return _run_phase(state, data, config, "adapter", "align_adapter", step)


def text_features(state, raw, use_adapter=True):
    raw = np.asarray(raw, dtype=np.float64)
    if use_adapter:
        raw, _ = AdapterHead.from_state(state).forward(raw)
    return nn.l2_normalize_forward(raw)[0]


def separation_from_embeddings(anchors, categories, texts, prompts=None):
    """Distance statistics between unit anchors and per-variant text embeddings.

    For each variant, every anchor is compared with its own text (positive)
    and with one representative text per other category (negatives). A
    negative identical to the positive text is skipped.
    """
    n = len(categories)
    if n == 0:
        raise ValueError("empty data")
    pos_all, neg_all, wins, total = [], [], 0, 0
    for v, T in texts.items():
        keep = [i for i in range(n) if prompts is None or prompts[v][i]]
        first = {}
        for i in keep:
            first.setdefault(categories[i], i)
        reps = {c: T[i] for c, i in first.items()}
        for i in keep:
            dp = float(np.linalg.norm(anchors[i] - T[i]))
            pos_all.append(dp)
            for c, t in reps.items():
                if c == categories[i] or np.array_equal(t, T[i]):
                    continue
                dn = float(np.linalg.norm(anchors[i] - t))
                neg_all.append(dn)
                wins += dp < dn
                total += 1
    if not pos_all:
        raise ValueError("empty data")
    return {
        "mean_pos_dist": float(np.mean(pos_all)),
        "mean_neg_dist": float(np.mean(neg_all)) if neg_all else float("nan"),
        "pair_accuracy": wins / total if total else float("nan"),
        "n_pairs": total,
    }


def separation_report(data, state, use_adapter=True, variants=None):
    if len(data) == 0:
        raise ValueError("empty data")
    anchors = visual_anchors(state, data.visual)
    variants = variants or list(data.texts)
    texts = {v: text_features(state, data.texts[v], use_adapter) for v in variants}
    return separation_from_embeddings(anchors, data.categories, texts, data.prompts)


def alignment_data_from_samples(state, samples, prompts):
    """Backbone embeddings for image samples and their prompt sets.

    ``prompts`` maps sample id to a :class:`PromptSet`. Images must already be
    at the model's input resolution.
    """
    backbone = BackbonePair.from_state(state)
    visual, texts = [], {v: [] for v in PROMPT_VARIANTS}
    strings = {v: [] for v in PROMPT_VARIANTS}
    cache = {}
    for s in samples:
        _, pooled, _ = backbone.visual(s.pixels)
        visual.append(pooled)
        ps = prompts[s.id]
        for v in PROMPT_VARIANTS:
            text = ps.variant(v)
            if text and text not in cache:
                cache[text] = backbone.text(text)
            texts[v].append(cache[text] if text else np.zeros(backbone.d))
            strings[v].append(text)
    return AlignmentData(np.stack(visual), [s.category for s in samples],
                         {v: np.stack(a) for v, a in texts.items()}, strings)


def make_separable_benchmark(n_categories=16, per_category=24, d=16, noise=0.15, seed=0):
    """Synthetic embeddings with a modal gap that a small head can close.

    Text embeddings are category prototypes; visual embeddings are a random
    rotation and shift of the prototypes plus Gaussian noise, so the classes
    are linearly separable on the visual side but misaligned with the text.
    Returns ``(train, heldout)`` :class:`AlignmentData`.
    """
    rng = np.random.default_rng(seed)
    proto = rng.normal(size=(n_categories, d))
    generic = rng.normal(size=d)
    rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
    shift = rng.normal(size=d)
    desc_offset = 0.3 * rng.normal(size=(n_categories, d))
    cats = [f"class{k:02d}" for k in range(n_categories)]

    def draw(n_each):
        labels = np.repeat(np.arange(n_categories), n_each)
        vis = (proto[labels] + noise * rng.normal(size=(labels.size, d))) @ rot.T + shift
        texts = {
            "category": proto[labels].copy(),
            "description": proto[labels] + desc_offset[labels],
            "generalized": 0.5 * proto[labels] + generic,
        }
        prompts = {
            "category": [cats[k] for k in labels],
            "description": [f"a photo of {cats[k]}" for k in labels],
            "generalized": [f"a photo of objects like {cats[k]}" for k in labels],
        }
        return AlignmentData(vis, [cats[k] for k in labels], texts, prompts)

    return draw(per_category), draw(max(4, per_category // 2))
