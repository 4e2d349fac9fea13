import math

import numpy as np
import pytest

from vtn.autodiff import parameter
from vtn.corpus import Manifest
from vtn.losses import LossConfig
from vtn.model import Checkpoint, VTN
from vtn.training import (Adam, PairSet, TrainConfig, TrainLog, TrainState, autoencoder_pairs, batch_indices,
                          clip_gradients, finetune_vc, init_vc_model, noam_lr, pretrain_decoder,
                          pretrain_encoder, train, tts_pairs, validation_loss, vc_pairs)

from helpers import TINY, tiny_corpus


@pytest.fixture(scope="module")
def corpus():
    return tiny_corpus()


def cfg(**kw):
    base = dict(batch_size=3, max_steps=6, warmup=4, val_interval=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_noam_examples():
    assert noam_lr(1, 4000, 512) == pytest.approx(512 ** -0.5 * 4000 ** -1.5, rel=1e-15)
    assert noam_lr(4000, 4000, 512) == pytest.approx(512 ** -0.5 * 4000 ** -0.5, rel=1e-15)
    assert noam_lr(16000, 4000, 512) == pytest.approx(512 ** -0.5 * 16000 ** -0.5, rel=1e-15)
    peak = noam_lr(200, 200, 64)
    assert all(noam_lr(s, 200, 64) <= peak for s in range(1, 1000))
    assert noam_lr(10, 200, 64, 0.5) == pytest.approx(0.5 * noam_lr(10, 200, 64), rel=1e-15)
    with pytest.raises(ValueError):
        noam_lr(0, 200, 64)


def test_adam_first_step_closed_form():
    p = parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e-3])
    opt = Adam({"p": p}, (0.9, 0.98), 1e-9)
    opt.step(0.1)
    g = np.array([0.5, -4.0, 1e-3])
    expect = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-9)
    np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)


def test_adam_matches_reference_over_100_steps():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    grads = rng.normal(size=(100, 5))
    p = parameter(x0.copy())
    opt = Adam({"p": p}, (0.9, 0.98), 1e-9)
    x, m, v = x0.copy(), np.zeros(5), np.zeros(5)
    for t in range(1, 101):
        g = grads[t - 1]
        p.grad = g.copy()
        opt.step(1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        x = x - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.98 ** t)) + 1e-9)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)


def test_clipping_and_nan_skip(caplog):
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    c = clip_gradients(g, 1.0)
    assert math.sqrt(sum((v * v).sum() for v in c.values())) == pytest.approx(1.0, rel=1e-15)
    assert clip_gradients(g, 10.0) is g
    p = parameter(np.ones(2))
    p.grad = np.array([3.0, 4.0])
    opt = Adam({"p": p})
    assert opt.step(1e-2, clip_norm=1.0) == pytest.approx(5.0)
    before = p.data.copy()
    p.grad = np.array([np.nan, 1.0])
    assert opt.step(1e-2) is None
    np.testing.assert_array_equal(p.data, before)
    assert opt.t == 1 and p.grad is None
    assert "non-finite" in caplog.text


def test_batch_schedule_is_a_permutation_per_epoch():
    n, b = 7, 3
    seen = [batch_indices(n, b, pos, 5) for pos in range(0, 3 * n, b)]
    flat = [i for s in seen for i in s]
    for e in range(3):
        assert sorted(flat[e * n:(e + 1) * n]) == list(range(n))
    assert batch_indices(n, b, 9, 5) == batch_indices(n, b, 9, 5)
    assert batch_indices(n, 10, 0, 5) == batch_indices(n, 7, 0, 5)


def test_empty_corpus_and_wrong_kind(corpus):
    empty = PairSet([], [], [], "tts")
    with pytest.raises(ValueError):
        pretrain_decoder(empty, TINY, cfg(stage="tts"))
    with pytest.raises(ValueError):
        pretrain_decoder(vc_pairs(corpus["a"], corpus["b"]), TINY, cfg(stage="tts"))
    with pytest.raises(ValueError):
        finetune_vc(PairSet([], [], [], "vc"), None, cfg(), init="scratch", model_cfg=TINY)


def test_non_parallel_corpus_rejected(corpus):
    b = corpus["b"]
    shuffled = Manifest(list(reversed(b.entries)), dict(b.meta))
    with pytest.raises(ValueError, match="not parallel"):
        vc_pairs(corpus["a"], shuffled)


def test_training_reduces_loss_and_logs(corpus, tmp_path):
    pairs = tts_pairs(corpus["a"])
    out = pretrain_decoder(pairs, TINY, cfg(max_steps=30, lr_scale=2.0, stage="tts"), val=pairs,
                           log_to=TrainLog(tmp_path / "log.jsonl"))
    totals = [r["total"] for r in out.result.records]
    assert len(totals) == 30 and totals[-1] < totals[0]
    assert out.checkpoint.stage == "tts" and out.checkpoint.lineage == ["tts"]
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 30 + 15
    assert len(out.result.validations) == 15


def test_resume_is_bit_identical(corpus):
    pairs = tts_pairs(corpus["a"])
    c = cfg(max_steps=8, stage="tts", accum_steps=2)
    full = pretrain_decoder(pairs, TINY, c)
    half = pretrain_decoder(pairs, TINY, c, stop_at=3)
    state = TrainState.from_bytes(half.result.state.to_bytes())
    ckpt = Checkpoint.from_bytes(half.checkpoint.to_bytes())
    resumed = pretrain_decoder(pairs, TINY, c, model=ckpt.build_model(), state=state)
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()
    assert [r["total"] for r in half.result.records + resumed.result.records] == \
        [r["total"] for r in full.result.records]


def test_frozen_decoder_and_lineage(corpus):
    tts = pretrain_decoder(tts_pairs(corpus["a"]), TINY, cfg(stage="tts", max_steps=3))
    enc = pretrain_encoder(autoencoder_pairs(corpus["a"]), tts.checkpoint, cfg(stage="encoder-pretrain"))
    for k, v in tts.checkpoint.params.items():
        if not k.startswith("encoder."):
            assert enc.checkpoint.params[k].tobytes() == v.tobytes(), k
    assert enc.checkpoint.lineage == ["tts", "encoder-pretrain"]
    changed = [k for k in enc.checkpoint.params if k.startswith("encoder.layers")
               and not np.array_equal(enc.checkpoint.params[k], tts.checkpoint.params[k])]
    assert changed
    with pytest.raises(ValueError, match="stage 'tts'"):
        pretrain_encoder(autoencoder_pairs(corpus["a"]), enc.checkpoint, cfg(stage="encoder-pretrain"))
    with pytest.raises(ValueError, match="encoder-pretrain"):
        init_vc_model(tts.checkpoint, "encoder+decoder", None, 0)
    bogus = Checkpoint(tts.checkpoint.params, "tts", tts.checkpoint.config, "tts", 3, ["vc", "tts"])
    with pytest.raises(ValueError, match="lineage"):
        init_vc_model(bogus, "decoder", None, 0)
    with pytest.raises(ValueError):
        init_vc_model(None, "decoder", TINY, 0)
    dec_model, lin = init_vc_model(tts.checkpoint, "decoder", None, 0)
    assert lin == ["tts", "vc"]
    sd = dec_model.state_dict()
    assert all(np.array_equal(sd[k], v) for k, v in tts.checkpoint.params.items() if k.startswith("decoder."))
    full, lin2 = init_vc_model(enc.checkpoint, "encoder+decoder", None, 0)
    assert lin2 == ["tts", "encoder-pretrain", "vc"]
    assert all(np.array_equal(full.state_dict()[k], v) for k, v in enc.checkpoint.params.items())


def test_vc_finetune_trains_everything(corpus):
    tts = pretrain_decoder(tts_pairs(corpus["a"]), TINY, cfg(stage="tts", max_steps=2))
    out = finetune_vc(vc_pairs(corpus["a"], corpus["b"]), tts.checkpoint, cfg(max_steps=2), init="decoder")
    after = out.checkpoint.params
    weights = [k for k in tts.checkpoint.params if k.startswith("decoder.") and k.endswith(".weight")]
    assert weights
    assert all(not np.array_equal(after[k], tts.checkpoint.params[k]) for k in weights)
    assert out.checkpoint.lineage == ["tts", "vc"]


def test_validation_loss_is_deterministic(corpus):
    pairs = vc_pairs(corpus["a"], corpus["b"])
    m = VTN(TINY, "vc", 3)
    assert validation_loss(m, pairs) == validation_loss(m, pairs)
    assert all(p.grad is None for p in m.named_parameters().values())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="nope")
    with pytest.raises(ValueError):
        TrainConfig(warmup=0)
    with pytest.raises(ValueError):
        TrainConfig(accum_steps=0)


def test_noam_half_peak_at_four_warmups():
    for warmup in (4, 200, 4000):
        assert noam_lr(4 * warmup, warmup, 64) == 0.5 * noam_lr(warmup, warmup, 64)


def test_encoder_pretraining_lowers_held_out_reconstruction():
    corpus = tiny_corpus(n=12, seed=4)["a"]
    train_set, held = corpus.subset(corpus.ids[:8]), corpus.subset(corpus.ids[8:])
    tts = pretrain_decoder(tts_pairs(train_set), TINY, cfg(stage="tts", max_steps=40, lr_scale=2.0))
    held_pairs = autoencoder_pairs(held)
    start = pretrain_encoder(autoencoder_pairs(train_set), tts.checkpoint, cfg(stage="encoder-pretrain", max_steps=0))
    before = validation_loss(start.model, held_pairs)
    enc = pretrain_encoder(autoencoder_pairs(train_set), tts.checkpoint,
                           cfg(stage="encoder-pretrain", max_steps=40, lr_scale=2.0))
    after = validation_loss(enc.model, held_pairs)
    assert after < before


def test_keep_best_restores_best_validation_and_resumes(corpus):
    pairs = vc_pairs(corpus["a"], corpus["b"])
    c = cfg(max_steps=10, val_interval=1, keep_best=True, lr_scale=3.0)
    out = finetune_vc(pairs, None, c, init="scratch", model_cfg=TINY, val=pairs)
    vals = [v["val_l1"] for v in out.result.validations]
    best = int(np.argmin(vals)) + 1
    assert out.result.state.best_step == best and out.checkpoint.meta["best_step"] == best
    assert validation_loss(out.model, pairs) == min(vals)
    assert out.result.state.step == 10
    model = VTN(TINY, "vc", 0)
    half = train(model, pairs, LossConfig(), c, val_pairs=pairs, stop_at=4)
    state = TrainState.from_bytes(half.state.to_bytes())
    train(model, pairs, LossConfig(), c, val_pairs=pairs, state=state)
    assert all(np.array_equal(v, out.checkpoint.params[k]) for k, v in model.state_dict().items())
