"""Frozen toy backbones, the visual FFN head and the text adapter.

The backbone is a deterministic stand-in for a pretrained vision-language
encoder: a fixed random linear patch embedder for images and a hashed
bag-of-tokens projection for text. Real encoder outputs can be used instead
through :func:`load_embedding_dump`.
"""

from __future__ import annotations

import csv
import re
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .domain import ConfigurationError, EmbeddingBatch, FormatError

MAX_TOKENS = 77
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2
N_SPECIAL = 3

_WORD_RE = re.compile(r"[a-z0-9]+")


def normalize_text(text):
    return _WORD_RE.findall(text.lower())


@dataclass
class Tokenizer:
    """Hashing word tokenizer.

    Token ids are derived from a CRC32 of the lower-cased word, so encoding
    needs no vocabulary. ``vocabulary`` only serves decoding: words listed in
    it map back from their ids, anything else decodes as ``<unk>``.
    """

    n_buckets: int = 2048
    max_len: int = MAX_TOKENS
    vocabulary: dict = field(default_factory=dict)

    def __post_init__(self):
        self._inverse = {}
        for w in list(self.vocabulary):
            self.add_word(w)

    def word_id(self, word):
        return N_SPECIAL + zlib.crc32(word.encode("utf-8")) % self.n_buckets

    def add_word(self, word):
        word = word.lower()
        i = self.word_id(word)
        self.vocabulary[word] = i
        self._inverse.setdefault(i, word)
        return i

    def fit(self, texts):
        for t in texts:
            for w in normalize_text(t):
                self.add_word(w)
        return self

    @property
    def size(self):
        return N_SPECIAL + self.n_buckets

    def encode(self, text):
        words = normalize_text(text)[: self.max_len - 1]
        return [self.word_id(w) for w in words] + [EOS_ID]

    def decode(self, ids):
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self._inverse.get(i, "<unk>"))
        return " ".join(words)


@dataclass
class BackbonePair:
    """Frozen visual and text encoders sharing an embedding width ``d``."""

    visual_params: dict
    text_params: dict
    tokenizer: Tokenizer
    patch_size: int

    @property
    def d(self):
        return self.visual_params["patch.weight"].shape[0]

    @classmethod
    def from_state(cls, state):
        cfg = state.config
        return cls(state.params["backbone_visual"], state.params["backbone_text"],
                   Tokenizer(n_buckets=cfg.text_buckets, max_len=cfg.max_tokens), cfg.patch_size)

    def patchify(self, pixels):
        """``(..., H, W, C)`` -> ``(..., N_p, P*P*3)`` with grayscale broadcast to RGB."""
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim < 3:
            raise ConfigurationError(f"pixels must be H x W x C, got shape {px.shape}")
        if px.shape[-1] == 1:
            px = np.repeat(px, 3, axis=-1)
        elif px.shape[-1] != 3:
            raise ConfigurationError(f"unsupported channel count {px.shape[-1]}")
        P = self.patch_size
        H, W = px.shape[-3] // P, px.shape[-2] // P
        if H == 0 or W == 0:
            raise ConfigurationError(f"image smaller than one {P}x{P} patch")
        lead = px.shape[:-3]
        px = px[..., : H * P, : W * P, :]
        px = px.reshape(*lead, H, P, W, P, 3)
        nd = len(lead)
        order = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3, nd + 4)
        return px.transpose(order).reshape(*lead, H * W, P * P * 3), (H, W)

    def visual(self, pixels):
        patches, grid = self.patchify(pixels)
        tokens = patches @ self.visual_params["patch.weight"].T + self.visual_params["patch.bias"]
        return tokens, tokens.mean(axis=-2), grid

    def text_ids(self, ids):
        table = self.text_params["token.table"]
        ids = [i for i in ids if i not in (PAD_ID, EOS_ID)]
        if not ids:
            return np.zeros(table.shape[1])
        return table[ids].mean(axis=0)

    def text(self, text):
        if not text or not text.strip():
            raise ValueError("text prompt is empty")
        return self.text_ids(self.tokenizer.encode(text))


def init_backbone_params(rng, d, patch_size, text_buckets):
    fan_in = patch_size * patch_size * 3
    visual = {
        "patch.weight": rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(d, fan_in)),
        "patch.bias": rng.normal(0.0, 0.1, size=d),
    }
    text = {"token.table": rng.normal(0.0, 1.0, size=(N_SPECIAL + text_buckets, d))}
    return visual, text


class FfnHead:
    """Fully connected stack ``d -> hidden -> ... -> d``.

    Hidden layers are Linear, BatchNorm, ReLU; the last layer is a plain
    Linear so outputs keep both signs. Applied along the last axis, so it
    works on pooled vectors ``(B, d)`` and on token grids ``(B, N, d)`` alike.
    """

    def __init__(self, params, depth, use_norm=True):
        self.params = params
        self.depth = depth
        self.use_norm = use_norm

    @classmethod
    def from_state(cls, state):
        return cls(state.params["ffn"], state.config.ffn_depth, state.config.ffn_norm)

    @property
    def in_dim(self):
        return self.params["l0.weight"].shape[1]

    @property
    def out_dim(self):
        return self.params[f"l{self.depth - 1}.weight"].shape[0]

    def forward(self, x, train=False):
        p = self.params
        lead = x.shape[:-1]
        h = x.reshape(-1, x.shape[-1])
        caches = []
        for i in range(self.depth):
            h, c_lin = nn.linear_forward(h, p[f"l{i}.weight"], p[f"l{i}.bias"])
            c_bn = c_relu = None
            if i < self.depth - 1:
                if self.use_norm:
                    h, c_bn = nn.batchnorm_forward(
                        h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                        p[f"bn{i}.running_mean"], p[f"bn{i}.running_var"], train)
                h, c_relu = nn.relu_forward(h)
            caches.append((c_lin, c_bn, c_relu))
        return h.reshape(*lead, h.shape[-1]), (caches, lead)

    def backward(self, cache, grad_out):
        caches, lead = cache
        p = self.params
        g = grad_out.reshape(-1, grad_out.shape[-1])
        grads = {}
        for i in reversed(range(self.depth)):
            c_lin, c_bn, c_relu = caches[i]
            if c_relu is not None:
                g = nn.relu_backward(c_relu, g)
            if c_bn is not None:
                g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = nn.batchnorm_backward(c_bn, g)
            g, grads[f"l{i}.weight"], grads[f"l{i}.bias"] = nn.linear_backward(c_lin, g, p[f"l{i}.weight"])
        return g.reshape(*lead, g.shape[-1]), grads

    @staticmethod
    def init_params(rng, d, depth, hidden=None, use_norm=True):
        hidden = hidden or d
        dims = [d] + [hidden] * (depth - 1) + [d]
        p = {}
        for i in range(depth):
            fan_in, fan_out = dims[i], dims[i + 1]
            p[f"l{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            p[f"l{i}.bias"] = np.zeros(fan_out)
            if i < depth - 1 and use_norm:
                p[f"bn{i}.gamma"] = np.ones(fan_out)
                p[f"bn{i}.beta"] = np.zeros(fan_out)
                p[f"bn{i}.running_mean"] = np.zeros(fan_out)
                p[f"bn{i}.running_var"] = np.ones(fan_out)
        return p

    @staticmethod
    def identity_params(d, depth=1):
        p = {}
        for i in range(depth):
            p[f"l{i}.weight"] = np.eye(d)
            p[f"l{i}.bias"] = np.zeros(d)
        return p

    def trainable(self):
        return [k for k in self.params if "running_" not in k]


class AdapterHead:
    """Residual bottleneck adapter.

    ``depth`` blocks of down-projection, ReLU, up-projection applied in
    sequence; with ``residual`` the stack input is added to its output.
    """

    def __init__(self, params, depth, residual=True):
        self.params = params
        self.depth = depth
        self.residual = residual

    @classmethod
    def from_state(cls, state):
        return cls(state.params["adapter"], state.config.adapter_depth, state.config.adapter_residual)

    @property
    def out_dim(self):
        return self.params[f"b{self.depth - 1}.up.weight"].shape[0]

    def forward(self, x, train=False):
        p = self.params
        h = x
        caches = []
        for i in range(self.depth):
            z, c_down = nn.linear_forward(h, p[f"b{i}.down.weight"], p[f"b{i}.down.bias"])
            z, c_relu = nn.relu_forward(z)
            h, c_up = nn.linear_forward(z, p[f"b{i}.up.weight"], p[f"b{i}.up.bias"])
            caches.append((c_down, c_relu, c_up))
        if self.residual:
            h = h + x
        return h, caches

    def backward(self, caches, grad_out):
        p = self.params
        grads = {}
        g = grad_out
        for i in reversed(range(self.depth)):
            c_down, c_relu, c_up = caches[i]
            g, grads[f"b{i}.up.weight"], grads[f"b{i}.up.bias"] = nn.linear_backward(c_up, g, p[f"b{i}.up.weight"])
            g = nn.relu_backward(c_relu, g)
            g, grads[f"b{i}.down.weight"], grads[f"b{i}.down.bias"] = nn.linear_backward(c_down, g, p[f"b{i}.down.weight"])
        if self.residual:
            g = g + grad_out
        return g, grads

    @staticmethod
    def init_params(rng, d, depth, bottleneck=None, zero_last=True):
        r = bottleneck or max(1, d // 4)
        p = {}
        for i in range(depth):
            p[f"b{i}.down.weight"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(r, d))
            p[f"b{i}.down.bias"] = np.zeros(r)
            p[f"b{i}.up.weight"] = rng.normal(0.0, np.sqrt(1.0 / r), size=(d, r))
            p[f"b{i}.up.bias"] = np.zeros(d)
        if zero_last:
            # residual adapter starts as the identity
            p[f"b{depth - 1}.up.weight"][:] = 0.0
        return p


def encode_visual(backbone, head, pixels, normalize=True, train=False):
    """Visual features ``f_v``: the head applied to every token and to the pooled vector.

    Returns ``(tokens, pooled)``; only ``pooled`` is L2-normalized.
    """
    tokens_b, pooled_b, _ = backbone.visual(pixels)
    if head is None:
        tokens, pooled = tokens_b, pooled_b
    else:
        if head.in_dim != backbone.d or head.out_dim != backbone.d:
            raise ConfigurationError(
                f"head maps {head.in_dim}->{head.out_dim} but backbone width is {backbone.d}")
        tokens, _ = head.forward(tokens_b, train=False)
        pooled, _ = head.forward(pooled_b[None] if pooled_b.ndim == 1 else pooled_b, train=train)
        if pooled_b.ndim == 1:
            pooled = pooled[0]
    if normalize:
        pooled, _ = nn.l2_normalize_forward(pooled)
    return tokens, pooled


def encode_text(backbone, adapter, text, normalize=True):
    """Text features: raw backbone output when ``adapter`` is None, else adapter-refined."""
    if not text or not text.strip():
        raise ValueError("text prompt is empty")
    e = backbone.text(text)
    if adapter is not None:
        if adapter.out_dim != backbone.d:
            raise ConfigurationError(f"adapter width {adapter.out_dim} != backbone width {backbone.d}")
        e, _ = adapter.forward(e)
    if normalize:
        e, _ = nn.l2_normalize_forward(e)
    return e


# --- embedding dump files ---------------------------------------------------

DUMP_MAGIC = b"RCEMBD"
DUMP_VERSION = 1
VARIANT_TAGS = {0: "visual", 1: "tokens", 2: "t_p", 3: "t_d", 4: "t_d_prime"}
VARIANT_CODES = {v: k for k, v in VARIANT_TAGS.items()}


@dataclass
class EmbeddingRecord:
    visual: EmbeddingBatch | None = None
    tokens: EmbeddingBatch | None = None
    texts: dict = field(default_factory=dict)


def write_embedding_dump(path, records, d):
    """Write ``{id: {variant: array}}``; variants are the names in ``VARIANT_CODES``."""
    entries = [(rid, var, np.atleast_2d(np.asarray(arr, dtype="<f4")))
               for rid, variants in records.items() for var, arr in variants.items()]
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC)
        f.write(struct.pack("<HIQ", DUMP_VERSION, d, len(entries)))
        for rid, var, arr in entries:
            raw = rid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", VARIANT_CODES[var]))
            if var == "tokens":
                f.write(struct.pack("<I", arr.shape[0]))
            f.write(arr.astype("<f4").tobytes())


def _assemble(entries, d):
    out = {}
    for rid, var, arr in entries:
        if arr.shape[-1] != d:
            raise FormatError(f"record {rid!r}: inconsistent dimension {arr.shape[-1]} (expected {d})")
        rec = out.setdefault(rid, EmbeddingRecord())
        if var == "visual":
            dup, rec.visual = rec.visual is not None, EmbeddingBatch(arr.reshape(1, d))
        elif var == "tokens":
            dup, rec.tokens = rec.tokens is not None, EmbeddingBatch(arr.reshape(-1, d))
        else:
            dup = var in rec.texts
            rec.texts[var] = EmbeddingBatch(arr.reshape(1, d))
        if dup:
            raise FormatError(f"record {rid!r}: duplicate id for variant {var}")
    return out


def load_embedding_dump(path):
    """Read a binary dump (or its CSV alternative, chosen by ``.csv`` suffix)."""
    if str(path).endswith(".csv"):
        return _load_embedding_csv(path)
    with open(path, "rb") as f:
        data = f.read()
    head = len(DUMP_MAGIC) + struct.calcsize("<HIQ")
    if len(data) < head or not data.startswith(DUMP_MAGIC):
        raise FormatError("missing header")
    version, d, count = struct.unpack_from("<HIQ", data, len(DUMP_MAGIC))
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}")
    pos = head
    entries = []
    for k in range(count):
        try:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            rid = data[pos:pos + n].decode("utf-8")
            pos += n
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if tag not in VARIANT_TAGS:
                raise FormatError(f"record {k} ({rid!r}): unknown variant tag {tag}")
            rows = 1
            if VARIANT_TAGS[tag] == "tokens":
                (rows,) = struct.unpack_from("<I", data, pos)
                pos += 4
            nbytes = 4 * rows * d
            if pos + nbytes > len(data):
                raise FormatError(f"record {k} ({rid!r}): truncated payload")
            arr = np.frombuffer(data, dtype="<f4", count=rows * d, offset=pos).astype(np.float64)
            pos += nbytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"record {k}: truncated record") from exc
        entries.append((rid, VARIANT_TAGS[tag], arr.reshape(rows, d)))
    return _assemble(entries, d)


def _load_embedding_csv(path):
    entries, d, tokens = [], None, {}
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 3:
                raise FormatError(f"line {lineno}: expected id, variant, values")
            rid, var = row[0], row[1].strip()
            if var.isdigit():
                var = VARIANT_TAGS.get(int(var), var)
            if var not in VARIANT_CODES:
                raise FormatError(f"line {lineno} ({rid!r}): unknown variant {var!r}")
            vals = np.array([float(v) for v in row[2:]])
            if d is None:
                d = vals.size
            elif vals.size != d:
                raise FormatError(f"record {rid!r}: inconsistent dimension {vals.size} (expected {d})")
            if var == "tokens":
                tokens.setdefault(rid, []).append(vals)
            else:
                entries.append((rid, var, vals[None]))
    if d is None:
        raise FormatError("missing header")
    entries += [(rid, "tokens", np.stack(rows)) for rid, rows in tokens.items()]
    return _assemble(entries, d)
