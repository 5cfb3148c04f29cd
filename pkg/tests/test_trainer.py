import math

import numpy as np
import pytest

from longctx.data import SyntheticSpec, generate_synthetic
from longctx.encoders import ImageEncoderConfig, TextEncoderConfig
from longctx.errors import NumericError, UsageError
from longctx.numerics import backward, finite_difference_grad, forward
from longctx.trainer import (
    TrainConfig,
    clip_gradients,
    contrastive_loss,
    decayable,
    effective_warmup,
    lr_schedule,
    parse_config_file,
    steps_to_loss,
    train,
    write_loss_curve,
    _build_train_graph,
)

SMALL_TEXT = TextEncoderConfig(context_length=12, vocab_size=280, embed_dim=16,
                               num_layers=1, num_heads=2, output_dim=8)
SMALL_IMG = ImageEncoderConfig(input_dim=6, hidden_dim=8, num_layers=1, output_dim=8)


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# -- contrastive loss ------------------------------------------------------------


def test_perfect_alignment_high_scale():
    z = np.eye(2)
    loss, _ = contrastive_loss(z, z, log_scale=math.log(100.0))
    assert loss < 1e-6


def test_uniform_similarities_give_log_n():
    # orthonormal pairs at scale exp(-inf)->0: all scaled sims equal 0
    z_img = np.eye(4)
    z_txt = np.roll(np.eye(4), 1, axis=0)
    loss, sim = contrastive_loss(z_img, z_txt, log_scale=-200.0)
    assert np.allclose(sim, 0.0)
    assert loss == math.log(4)


def test_identity_similarity_exact_value():
    z = np.eye(2)
    loss, sim = contrastive_loss(z, z, log_scale=0.0)
    np.testing.assert_array_equal(sim, np.eye(2))
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_loss_requires_two_pairs_and_unit_norm():
    z = np.ones((1, 4)) / 2.0
    with pytest.raises(UsageError, match="2 pairs"):
        contrastive_loss(z, z, 0.0)
    bad = np.ones((2, 4))
    with pytest.raises(UsageError, match="unit-norm"):
        contrastive_loss(bad, bad, 0.0)


def test_loss_permutation_equivariant():
    rng = np.random.default_rng(0)
    zi, zt = unit_rows(rng, 6, 8), unit_rows(rng, 6, 8)
    base, _ = contrastive_loss(zi, zt, 1.0)
    perm = rng.permutation(6)
    permuted, _ = contrastive_loss(zi[perm], zt[perm], 1.0)
    assert abs(base - permuted) < 1e-10


def test_loss_rotation_invariant():
    rng = np.random.default_rng(1)
    zi, zt = unit_rows(rng, 5, 8), unit_rows(rng, 5, 8)
    q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    base, _ = contrastive_loss(zi, zt, 0.7)
    rotated, _ = contrastive_loss(zi @ q, zt @ q, 0.7)
    assert abs(base - rotated) < 1e-8


def test_loss_approaches_zero_in_ideal_geometry():
    # matched sims -> 1, mismatched -> -1 at fixed scale: loss -> 0
    z = np.array([[1.0, 0.0], [-1.0, 0.0]])
    loss, _ = contrastive_loss(z, z, log_scale=math.log(20.0))
    assert loss < 1e-8


# -- schedule and clipping ---------------------------------------------------------


def test_schedule_endpoints_paper_scale():
    cfg = TrainConfig(warmup_steps=1000, learning_rate=5e-4)
    total = 10_000
    assert lr_schedule(0, cfg, total) == 0.0
    assert lr_schedule(1000, cfg, total) == cfg.learning_rate
    mid = 1000 + (total - 1000) // 2
    assert lr_schedule(mid, cfg, total) == pytest.approx(cfg.learning_rate / 2, abs=1e-20)
    assert lr_schedule(total, cfg, total) == pytest.approx(0.0, abs=1e-19)


def test_schedule_desk_scale_warmup_shrinks():
    cfg = TrainConfig(warmup_steps=1000)
    assert effective_warmup(cfg, 400) == 20
    assert effective_warmup(cfg, 1000) == 1000
    assert lr_schedule(20, cfg, 400) == cfg.learning_rate


def test_clip_under_threshold_unchanged():
    grads = {"a": np.array([0.3, 0.4])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 0.5
    np.testing.assert_array_equal(clipped["a"], grads["a"])


def test_clip_rescales_to_max_norm():
    grads = {"a": np.array([2.0, 0.0]), "b": np.zeros(3)}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 2.0
    np.testing.assert_allclose(clipped["a"], [1.0, 0.0], atol=1e-15)
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values()))
    assert abs(total - 1.0) <= 1e-12


def test_clip_rejects_nonfinite():
    with pytest.raises(NumericError):
        clip_gradients({"a": np.array([np.inf])}, 1.0)


def test_paper_default_clip_norm():
    assert TrainConfig().grad_clip_norm == 1.0


def test_decay_mask():
    assert decayable("txt.l0.wq")
    assert decayable("txt.tok_emb")
    assert not decayable("txt.pos_emb")
    assert not decayable("txt.l0.ln1.g")
    assert not decayable("txt.l0.bq")
    assert not decayable("log_scale")


# -- full-loss gradient check -------------------------------------------------------


def test_full_loss_gradients_match_finite_differences():
    from longctx.encoders import init_params, attention_mask

    rng = np.random.default_rng(7)
    batch, seq_len = 4, 6
    g = _build_train_graph(SMALL_TEXT, SMALL_IMG, batch, seq_len, "float64")
    params = init_params(SMALL_TEXT, SMALL_IMG, seed=3)
    visible = np.array([4, 6, 3, 5])
    bindings = dict(params)
    bindings["log_scale"] = np.asarray(1.3)
    bindings["ids"] = rng.integers(0, 256, size=(batch, seq_len))
    bindings["mask"] = attention_mask(visible, seq_len)
    bindings["eos_idx"] = visible - 1
    bindings["img"] = rng.normal(size=(batch, SMALL_IMG.input_dim))
    tape = forward(g, bindings)
    grads = backward(tape, output="loss")
    for name in ("txt.l0.wq", "txt.proj", "img.proj", "txt.lnf.g", "log_scale",
                 "txt.pos_emb"):
        fd = finite_difference_grad(g, bindings, name, output="loss")
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(grads[name])), 1e-6)
        assert np.max(np.abs(fd - grads[name]) / denom) <= 1e-4, name


# -- training loop ------------------------------------------------------------------


def tiny_corpus():
    spec = SyntheticSpec(num_classes=3, samples_per_class=8, image_dim=6,
                         distractor_prefix_tokens=3, class_token_position=4, seed=5)
    corpus, _ = generate_synthetic(spec)
    return corpus


def tiny_config(**kw):
    base = dict(context_length=12, batch_size=6, max_epochs=2, seed=1,
                vocab_size=300, learning_rate=3e-3, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic_curves():
    corpus = tiny_corpus()
    r1 = train(tiny_config(), corpus, text_cfg=None, img_cfg=None)
    r2 = train(tiny_config(), corpus)
    assert [(p.step, p.loss, p.lr) for p in r1.curve] == \
           [(p.step, p.loss, p.lr) for p in r2.curve]


def test_train_loss_decreases():
    corpus = tiny_corpus()
    result = train(tiny_config(max_epochs=6), corpus)
    steps_per_epoch = len(corpus) // 6
    first = np.mean([p.loss for p in result.curve[:steps_per_epoch]])
    last = np.mean([p.loss for p in result.curve[-steps_per_epoch:]])
    assert last < first


def test_train_rejects_small_corpus():
    corpus = tiny_corpus()
    with pytest.raises(UsageError, match="batch_size"):
        train(tiny_config(batch_size=1000), corpus)


def test_train_drops_partial_batches_and_counts_steps():
    corpus = tiny_corpus()  # 24 records
    cfg = tiny_config(batch_size=7, max_epochs=2)
    result = train(cfg, corpus)
    assert len(result.curve) == 2 * (24 // 7)
    assert [p.step for p in result.curve] == list(range(len(result.curve)))


def test_log_scale_clamped():
    corpus = tiny_corpus()
    cfg = tiny_config(log_scale_init=math.log(99.0), learning_rate=0.5, max_epochs=3)
    result = train(cfg, corpus)
    assert math.exp(result.state.log_scale) <= 100.0 + 1e-9


def test_trained_model_embeds(tmp_path):
    corpus = tiny_corpus()
    result = train(tiny_config(), corpus)
    z = result.model.encode_texts([corpus.records[0].caption])
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    write_loss_curve(result.curve, tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr,seconds"
    assert len(lines) == len(result.curve) + 1


def test_steps_to_loss():
    from longctx.trainer import LossPoint
    curve = [LossPoint(0, 3.0, 0.1, 0.0), LossPoint(1, 2.0, 0.1, 0.1),
             LossPoint(2, 1.0, 0.1, 0.2)]
    assert steps_to_loss(curve, 2.0) == 1
    assert steps_to_loss(curve, 0.5) is None


def test_parse_config_file(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text("# comment\nlearning_rate = 0.001\nbatch_size=32\n\n")
    assert parse_config_file(p) == {"learning_rate": "0.001", "batch_size": "32"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(UsageError, match="line 1"):
        parse_config_file(bad)


def test_invalid_train_configs():
    with pytest.raises(UsageError):
        TrainConfig(beta1=1.5)
    with pytest.raises(UsageError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(UsageError):
        TrainConfig(grad_clip_norm=-1.0)
