"""Tiny text and image encoders producing unit-norm embeddings.

Text side: pre-norm transformer blocks with learned absolute positions and
EOS pooling; the context length is a first-class config knob and only sizes
the positional table.  Image side: an MLP over precomputed feature vectors.
Both are expressed as numerics graphs so training can differentiate end to
end through the contrastive objective.

Attention masking uses a large negative finite constant instead of -inf so
every intermediate stays in the finite domain the numerics module enforces;
masked positions still get exactly zero probability after softmax.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .numerics import Graph, backward, forward
from .tokenizer import TokenSeq, Vocab, encode

MASK_VALUE = -1e9
INIT_STD = 0.02
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TextEncoderConfig:
    context_length: int = 77
    vocab_size: int = 8192
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    output_dim: int = 32

    def __post_init__(self):
        if self.context_length < 3:
            raise UsageError("context_length must be >= 3")
        if self.embed_dim % self.num_heads:
            raise UsageError("embed_dim must be divisible by num_heads")


@dataclass(frozen=True)
class ImageEncoderConfig:
    input_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 2
    output_dim: int = 32

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.num_layers, self.output_dim) < 1:
            raise UsageError("image encoder dims must be positive")


def param_shapes(text_cfg: TextEncoderConfig, img_cfg: ImageEncoderConfig) -> dict[str, tuple]:
    """Name -> shape map shared by initialization and graph construction."""
    if text_cfg.output_dim != img_cfg.output_dim:
        raise UsageError("text and image output_dim must match for a paired model")
    d = text_cfg.embed_dim
    shapes = {
        "txt.tok_emb": (text_cfg.vocab_size, d),
        "txt.pos_emb": (text_cfg.context_length, d),
        "txt.lnf.g": (d,), "txt.lnf.b": (d,),
        "txt.proj": (d, text_cfg.output_dim),
    }
    for i in range(text_cfg.num_layers):
        p = f"txt.l{i}"
        shapes.update({
            f"{p}.ln1.g": (d,), f"{p}.ln1.b": (d,),
            f"{p}.wq": (d, d), f"{p}.bq": (d,),
            f"{p}.wk": (d, d), f"{p}.bk": (d,),
            f"{p}.wv": (d, d), f"{p}.bv": (d,),
            f"{p}.wo": (d, d), f"{p}.bo": (d,),
            f"{p}.ln2.g": (d,), f"{p}.ln2.b": (d,),
            f"{p}.w1": (d, 4 * d), f"{p}.b1": (4 * d,),
            f"{p}.w2": (4 * d, d), f"{p}.b2": (d,),
        })
    width = img_cfg.input_dim
    for i in range(img_cfg.num_layers):
        shapes[f"img.l{i}.w"] = (width, img_cfg.hidden_dim)
        shapes[f"img.l{i}.b"] = (img_cfg.hidden_dim,)
        width = img_cfg.hidden_dim
    shapes["img.proj"] = (width, img_cfg.output_dim)
    return shapes


def init_params(text_cfg: TextEncoderConfig, img_cfg: ImageEncoderConfig,
                seed: int) -> dict[str, np.ndarray]:
    """Deterministic N(0, 0.02^2) weights, unit gains, zero biases.

    Each parameter gets its own seeded stream keyed by name, so the shared
    (non-positional) weights are identical across context lengths for the
    same seed.
    """
    params = {}
    for name, shape in param_shapes(text_cfg, img_cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        else:
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed,
                                       spawn_key=(zlib.crc32(name.encode()),)))
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


# -- graph builders ---------------------------------------------------------------


def build_text_tower(g: Graph, cfg: TextEncoderConfig, batch: int, seq_len: int):
    """Append the text encoder to a graph; returns the [B, out] embedding node.

    Expects bindings: txt.* parameters, ``ids`` [B, L] int, ``mask``
    [B, 1, 1, L] additive, ``eos_idx`` [B] int.
    """
    d, heads = cfg.embed_dim, cfg.num_heads
    dh = d // heads
    ids = g.input("ids")
    mask = g.input("mask")
    eos_idx = g.input("eos_idx")
    tok = g.input("txt.tok_emb")
    pos = g.input("txt.pos_emb")
    h = g.add(g.embedding(tok, ids), g.slice_rows(pos, seq_len))
    for i in range(cfg.num_layers):
        p = f"txt.l{i}"
        a = g.layer_norm(h, g.input(f"{p}.ln1.g"), g.input(f"{p}.ln1.b"))

        def heads_of(x):
            return g.transpose(g.reshape(x, (batch, seq_len, heads, dh)), (0, 2, 1, 3))

        q = heads_of(g.add(g.matmul(a, g.input(f"{p}.wq")), g.input(f"{p}.bq")))
        k = heads_of(g.add(g.matmul(a, g.input(f"{p}.wk")), g.input(f"{p}.bk")))
        v = heads_of(g.add(g.matmul(a, g.input(f"{p}.wv")), g.input(f"{p}.bv")))
        # prescale q so the [B,H,L,L] score tensor needs no extra pass
        scores = g.matmul(g.scale(q, 1.0 / np.sqrt(dh)),
                          g.transpose(k, (0, 1, 3, 2)), name=f"{p}.scores")
        att = g.softmax(g.add(scores, mask))
        ctx = g.reshape(g.transpose(g.matmul(att, v), (0, 2, 1, 3)),
                        (batch, seq_len, d))
        h = g.add(h, g.add(g.matmul(ctx, g.input(f"{p}.wo")), g.input(f"{p}.bo")))
        m = g.layer_norm(h, g.input(f"{p}.ln2.g"), g.input(f"{p}.ln2.b"))
        ff = g.matmul(g.gelu(g.add(g.matmul(m, g.input(f"{p}.w1")), g.input(f"{p}.b1"))),
                      g.input(f"{p}.w2"))
        h = g.add(h, g.add(ff, g.input(f"{p}.b2")))
    hf = g.layer_norm(h, g.input("txt.lnf.g"), g.input("txt.lnf.b"))
    pooled = g.gather_rows(hf, eos_idx)
    return g.l2_normalize(g.matmul(pooled, g.input("txt.proj")), name="z_txt")


def build_image_tower(g: Graph, cfg: ImageEncoderConfig):
    """Append the image MLP; expects ``img`` [B, input_dim] plus img.* params."""
    h = g.input("img")
    for i in range(cfg.num_layers):
        h = g.gelu(g.add(g.matmul(h, g.input(f"img.l{i}.w")), g.input(f"img.l{i}.b")))
    return g.l2_normalize(g.matmul(h, g.input("img.proj")), name="z_img")


def attention_mask(visible_lengths: np.ndarray, seq_len: int) -> np.ndarray:
    """Additive mask hiding PAD key positions: [B, 1, 1, L]."""
    cols = np.arange(seq_len)
    blocked = cols[None, :] >= np.asarray(visible_lengths)[:, None]
    return np.where(blocked, MASK_VALUE, 0.0)[:, None, None, :]


def batch_arrays(seqs: list[TokenSeq], pad_id: int, trim_to: int | None = None):
    """Stack TokenSeqs to (ids [B, L], visible [B]); trims shared padding."""
    visible = np.array([s.visible_length for s in seqs], dtype=np.int64)
    max_vis = int(visible.max())
    width = trim_to if trim_to is not None else max_vis
    if width < max_vis:
        raise UsageError("cannot trim below the longest visible sequence")
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        take = min(len(s.ids), width)
        ids[r, :take] = s.ids[:take]
    return ids, visible


class _GraphCache:
    """Reuses built graphs keyed by (kind, batch, seq_len, dtype)."""

    def __init__(self):
        self._cache = {}

    def text(self, cfg: TextEncoderConfig, batch: int, seq_len: int, dtype):
        key = ("text", cfg, batch, seq_len, str(dtype))
        if key not in self._cache:
            g = Graph(dtype=dtype)
            g.output(build_text_tower(g, cfg, batch, seq_len))
            self._cache[key] = g
        return self._cache[key]

    def image(self, cfg: ImageEncoderConfig, dtype):
        key = ("image", cfg, str(dtype))
        if key not in self._cache:
            g = Graph(dtype=dtype)
            g.output(build_image_tower(g, cfg))
            self._cache[key] = g
        return self._cache[key]


_GRAPHS = _GraphCache()


def text_encode(params: dict, cfg: TextEncoderConfig, seqs: list[TokenSeq],
                dtype="float64") -> np.ndarray:
    """Unit-norm embedding per sequence, pooled from the EOS position.

    Sequences must have been encoded with visible_length <= context_length;
    trailing padding beyond the batch maximum is trimmed (it cannot affect
    the embeddings).
    """
    if not seqs:
        raise UsageError("empty batch")
    for s in seqs:
        if s.visible_length > cfg.context_length:
            raise UsageError(
                f"sequence visible_length {s.visible_length} exceeds context "
                f"{cfg.context_length}; encode with the right window first")
    pad_id = cfg.vocab_size - 3
    ids, visible = batch_arrays(seqs, pad_id=pad_id)
    g = _GRAPHS.text(cfg, len(seqs), ids.shape[1], dtype)
    bindings = {k: v for k, v in params.items() if k in g.inputs}
    bindings["ids"] = ids
    bindings["mask"] = attention_mask(visible, ids.shape[1])
    bindings["eos_idx"] = visible - 1
    return forward(g, bindings).outputs["z_txt"]


def image_encode(params: dict, cfg: ImageEncoderConfig, images: np.ndarray,
                 dtype="float64") -> np.ndarray:
    """Unit-norm embedding per image feature vector."""
    images = np.atleast_2d(np.asarray(images))
    if images.shape[1] != cfg.input_dim:
        raise UsageError(f"expected feature dim {cfg.input_dim}, got {images.shape[1]}")
    g = _GRAPHS.image(cfg, dtype)
    bindings = {k: v for k, v in params.items() if k in g.inputs}
    bindings["img"] = images
    return forward(g, bindings).outputs["z_img"]


# -- bundled model ------------------------------------------------------------------


@dataclass
class TrainedModel:
    """Everything needed to embed new text and images."""

    text_cfg: TextEncoderConfig
    img_cfg: ImageEncoderConfig
    params: dict
    vocab: Vocab
    log_scale: float
    dtype: str = "float64"

    def encode_texts(self, texts: list[str], batch_size: int = 64) -> np.ndarray:
        seqs = [encode(self.vocab, t, self.text_cfg.context_length) for t in texts]
        chunks = [text_encode(self.params, self.text_cfg, seqs[i:i + batch_size],
                              dtype=self.dtype)
                  for i in range(0, len(seqs), batch_size)]
        return np.concatenate(chunks, axis=0)

    def encode_images(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = np.atleast_2d(np.asarray(images))
        chunks = [image_encode(self.params, self.img_cfg, images[i:i + batch_size],
                               dtype=self.dtype)
                  for i in range(0, len(images), batch_size)]
        return np.concatenate(chunks, axis=0)


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, text_cfg: TextEncoderConfig, img_cfg: ImageEncoderConfig,
                    params: dict, log_scale: float) -> None:
    """Single-file npz container with a versioned JSON header."""
    meta = {
        "format": "longctx-checkpoint",
        "version": CHECKPOINT_VERSION,
        "text_cfg": asdict(text_cfg),
        "img_cfg": asdict(img_cfg),
        "log_scale": float(log_scale),
    }
    arrays = {f"param/{k}": v for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if meta.get("format") != "longctx-checkpoint":
                raise DataError(f"{path} is not a checkpoint file")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {meta.get('version')}")
            params = {k[len("param/"):]: data[k] for k in data.files
                      if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    return (TextEncoderConfig(**meta["text_cfg"]), ImageEncoderConfig(**meta["img_cfg"]),
            params, meta["log_scale"])
