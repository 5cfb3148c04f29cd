"""Symmetric contrastive training loop.

One optimizer step = encode both modalities, symmetric cross-entropy over the
scaled similarity matrix, backward, global-norm clipping, decoupled-weight-
decay Adam update with linear-warmup/cosine-decay learning rate, and a clamp
on the learnable temperature exponent.  Everything is seeded and
deterministic; the loss curve records wall time but the curve's deterministic
identity is (step, loss, lr).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PairedCorpus
from .encoders import (
    ImageEncoderConfig,
    TextEncoderConfig,
    TrainedModel,
    attention_mask,
    batch_arrays,
    build_image_tower,
    build_text_tower,
)
from .errors import NumericError, UsageError
from .numerics import Graph, backward, forward
from .tokenizer import Vocab, encode, train_bpe

ADAM_EPS = 1e-8
DESK_SCALE_WARMUP_FRACTION = 0.05   # stands in for warmup 1000 of ~20k+ steps


@dataclass(frozen=True)
class TrainConfig:
    context_length: int = 512
    batch_size: int = 64
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_steps: int = 1000
    max_epochs: int = 20
    grad_clip_norm: float = 1.0
    seed: int = 0
    log_scale_init: float = math.log(1.0 / 0.07)
    log_scale_max: float = math.log(100.0)
    weight_decay: float = 0.2
    vocab_size: int = 8192
    dtype: str = "float64"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise UsageError("betas must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.grad_clip_norm <= 0:
            raise UsageError("grad_clip_norm must be positive")
        if self.batch_size < 2:
            raise UsageError("contrastive training needs batch_size >= 2")


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int
    log_scale: float


@dataclass(frozen=True)
class LossPoint:
    step: int
    loss: float
    lr: float
    seconds: float


LossCurve = list  # of LossPoint


@dataclass
class TrainResult:
    model: TrainedModel
    state: TrainState
    curve: list[LossPoint]
    config: TrainConfig


def contrastive_loss(z_img: np.ndarray, z_txt: np.ndarray,
                     log_scale: float) -> tuple[float, np.ndarray]:
    """Symmetric InfoNCE-style loss over unit-norm embeddings.

    sim[i][j] = exp(log_scale) * <z_img_i, z_txt_j>; the loss averages the
    row-wise (image->text) and column-wise (text->image) cross-entropies with
    the diagonal as the target.
    """
    z_img = np.asarray(z_img, dtype=np.float64)
    z_txt = np.asarray(z_txt, dtype=np.float64)
    if z_img.shape != z_txt.shape or z_img.ndim != 2:
        raise UsageError(f"paired embeddings required, got {z_img.shape} / {z_txt.shape}")
    n = z_img.shape[0]
    if n < 2:
        raise UsageError("contrastive loss needs at least 2 pairs")
    for name, z in (("image", z_img), ("text", z_txt)):
        norms = np.linalg.norm(z, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-5:
            raise UsageError(f"{name} embeddings are not unit-norm")
    sim = math.exp(log_scale) * (z_img @ z_txt.T)
    loss = 0.5 * (_cross_entropy_rows(sim) + _cross_entropy_rows(sim.T))
    return float(loss), sim


def _cross_entropy_rows(sim: np.ndarray) -> float:
    m = sim.max(axis=1, keepdims=True)
    lse = np.squeeze(m, 1) + np.log(np.exp(sim - m).sum(axis=1))
    return float(np.mean(lse - np.diagonal(sim)))


def effective_warmup(cfg: TrainConfig, total_steps: int) -> int:
    """Configured warmup at paper scale; proportionally shrunk desk-scale.

    Below 1000 total steps the configured warmup would swallow the whole
    schedule, so it is capped at 5% of total steps (50 per 1000).
    """
    if total_steps >= 1000:
        return cfg.warmup_steps
    return min(cfg.warmup_steps, max(1, int(total_steps * DESK_SCALE_WARMUP_FRACTION)))


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``learning_rate``, then cosine decay to zero."""
    warmup = effective_warmup(cfg, total_steps)
    if total_steps <= warmup:
        raise UsageError("total_steps must exceed warmup")
    if step < warmup:
        return cfg.learning_rate * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Rescale all gradients so the global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise UsageError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


def decayable(name: str) -> bool:
    """Decoupled weight decay applies to weight matrices only."""
    return (not name.endswith((".g", ".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2"))
            and name not in ("txt.pos_emb", "log_scale"))


def _build_train_graph(text_cfg, img_cfg, batch, seq_len, dtype) -> Graph:
    g = Graph(dtype=dtype)
    z_txt = build_text_tower(g, text_cfg, batch, seq_len)
    z_img = build_image_tower(g, img_cfg)
    s = g.exp(g.input("log_scale"))
    sim = g.mul(g.matmul(z_img, g.transpose(z_txt, (1, 0))), s, name="sim")
    d = g.diag(sim)
    row_ce = g.mean(g.sub(g.logsumexp(sim), d))
    col_ce = g.mean(g.sub(g.logsumexp(g.transpose(sim, (1, 0))), d))
    g.output(g.scale(g.add(row_ce, col_ce), 0.5, name="loss"))
    g.output(sim, "sim")
    return g


def train(cfg: TrainConfig, corpus: PairedCorpus,
          text_cfg: TextEncoderConfig | None = None,
          img_cfg: ImageEncoderConfig | None = None,
          vocab: Vocab | None = None) -> TrainResult:
    """Full training run over seeded shuffled epochs; drops partial batches.

    The vocabulary is trained on the corpus captions when not supplied.
    Aborts with a step-naming diagnostic if the loss leaves the finite
    domain.
    """
    if len(corpus) < cfg.batch_size:
        raise UsageError(f"corpus size {len(corpus)} < batch_size {cfg.batch_size}")
    if vocab is None:
        vocab = train_bpe(corpus.captions(), cfg.vocab_size, cfg.seed)
    if text_cfg is None:
        text_cfg = TextEncoderConfig(context_length=cfg.context_length,
                                     vocab_size=vocab.size)
    if text_cfg.context_length != cfg.context_length:
        raise UsageError("text_cfg.context_length must match cfg.context_length")
    if img_cfg is None:
        img_cfg = ImageEncoderConfig(input_dim=corpus.image_dim,
                                     output_dim=text_cfg.output_dim)

    from .encoders import init_params  # local to avoid cycle at import time
    params = {k: v.astype(cfg.dtype) for k, v in init_params(text_cfg, img_cfg,
                                                             cfg.seed).items()}
    params["log_scale"] = np.asarray(cfg.log_scale_init, dtype=cfg.dtype)
    state = TrainState(params=params,
                       m={k: np.zeros_like(v) for k, v in params.items()},
                       v={k: np.zeros_like(v) for k, v in params.items()},
                       step=0, log_scale=cfg.log_scale_init)

    seqs = [encode(vocab, r.caption, cfg.context_length) for r in corpus.records]
    ids_all, visible_all = batch_arrays(seqs, pad_id=vocab.pad_id,
                                        trim_to=cfg.context_length)
    images_all = corpus.images().astype(cfg.dtype)

    steps_per_epoch = len(corpus) // cfg.batch_size
    total_steps = cfg.max_epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    graphs: dict[int, Graph] = {}
    curve: list[LossPoint] = []
    t0 = time.perf_counter()

    for _epoch in range(cfg.max_epochs):
        order = rng.permutation(len(corpus))
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            visible = visible_all[idx]
            seq_len = _round_up(int(visible.max()), 8, cfg.context_length)
            graph = graphs.get(seq_len)
            if graph is None:
                graph = _build_train_graph(text_cfg, img_cfg, cfg.batch_size,
                                           seq_len, cfg.dtype)
                graphs[seq_len] = graph
            bindings = dict(state.params)
            bindings["ids"] = ids_all[idx][:, :seq_len]
            bindings["mask"] = attention_mask(visible, seq_len)
            bindings["eos_idx"] = visible - 1
            bindings["img"] = images_all[idx]
            try:
                tape = forward(graph, bindings)
            except NumericError as exc:
                raise NumericError(f"training diverged at step {state.step}: {exc}") from exc
            loss = float(tape.outputs["loss"])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at step {state.step}")
            grads = backward(tape, output="loss")
            grads = {k: grads[k] for k in state.params}
            grads, _ = clip_gradients(grads, cfg.grad_clip_norm)
            lr = lr_schedule(state.step, cfg, total_steps)
            _adamw_update(state, grads, lr, cfg)
            state.log_scale = min(float(state.params["log_scale"]), cfg.log_scale_max)
            state.params["log_scale"] = np.asarray(state.log_scale, dtype=cfg.dtype)
            curve.append(LossPoint(step=state.step, loss=loss, lr=lr,
                                   seconds=time.perf_counter() - t0))
            state.step += 1

    model = TrainedModel(text_cfg=text_cfg, img_cfg=img_cfg,
                         params=state.params, vocab=vocab,
                         log_scale=state.log_scale, dtype=cfg.dtype)
    return TrainResult(model=model, state=state, curve=curve, config=cfg)


def _round_up(n: int, multiple: int, cap: int) -> int:
    return min(cap, ((n + multiple - 1) // multiple) * multiple)


def _adamw_update(state: TrainState, grads: dict, lr: float, cfg: TrainConfig) -> None:
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if decayable(k):
            update = update + cfg.weight_decay * state.params[k]
        state.params[k] = state.params[k] - lr * update


# -- loss-curve files ---------------------------------------------------------------


CURVE_CSV_HEADER = "step,loss,lr,seconds"


def write_loss_curve(curve: list[LossPoint], path) -> None:
    lines = [CURVE_CSV_HEADER]
    lines += [f"{p.step},{p.loss!r},{p.lr!r},{p.seconds:.3f}" for p in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def steps_to_loss(curve: list[LossPoint], threshold: float) -> int | None:
    """First step whose loss is at or below the threshold; None if never."""
    for p in curve:
        if p.loss <= threshold:
            return p.step
    return None


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file with #-comments; keys mirror TrainConfig."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path} line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out
