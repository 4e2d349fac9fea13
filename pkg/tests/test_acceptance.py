"""Acceptance checks 1-10.  Each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from vtn import autodiff as ad
from vtn.autodiff import MaskSource, gradcheck
from vtn.dsp import StaleCacheError, read_matrix, write_matrix, FeatureConfig
from vtn.evaluation import MCD_CONST, dtw_align, mcd
from vtn.inference import free_running_l1, incremental_equivalence_check, synthesize_tts
from vtn.losses import LossConfig, compute_losses, guided_attention_loss
from vtn.model import Checkpoint, ModelConfig, VTN, stack_frames, stacked_length, unstack_frames
from vtn.nn import length_mask
from vtn.training import TrainConfig, TrainLog, pretrain_decoder, tts_pairs

from helpers import tiny_corpus
from test_autodiff import PRIMITIVES
from test_evaluation import all_path_costs


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# ------------------------------------------------------------------- 1

GRAPH_CFG = ModelConfig(enc_layers=1, dec_layers=1, heads=2, d_model=8, d_ff=16, n_mels=6, vocab_size=7,
                        prenet_units=8, postnet_channels=4, postnet_layers=5)


def full_graph(mode):
    """Training loss of a one-layer encoder/decoder at d_model=8."""
    def build(seed):
        m = VTN(GRAPH_CFG, mode, seed)
        rng = np.random.default_rng(seed)
        # non-zero biases keep relu pre-activations off their kink
        for name, p in m.named_parameters().items():
            if name.endswith("bias"):
                p.data = rng.normal(0, 0.1, p.shape)
        src = rng.integers(0, 7, (2, 5)) if mode == "tts" else rng.normal(size=(2, 7, 6))
        tgt = rng.normal(size=(2, 5, 6))
        keep_rng = np.random.default_rng([seed, 1])
        keep = tuple((keep_rng.random((2, 3, 8)) >= 0.5) / 0.5 for _ in range(2))
        in_len = [5, 3] if mode == "tts" else [7, 4]

        def loss():
            out = m.forward(src, in_len, tgt, [5, 3], prenet_keep=keep)
            return compute_losses(out, tgt, [5, 3], LossConfig(), GRAPH_CFG.heads, GRAPH_CFG.r_d).total
        return m.parameters(), loss
    return build


def test_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    worst = {}
    for name, builder in PRIMITIVES.items():
        worst[name] = max(gradcheck(builder, s) for s in range(10))
    for mode in ("vc", "tts"):
        worst[f"graph-{mode}"] = max(gradcheck(full_graph(mode), s, max_checks_per_param=8) for s in range(10))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 120
    verdict(capsys, 1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks x 10 seeds, "
                           f"{elapsed:.1f}s")


# ------------------------------------------------------------------- 2

def test_2_attention_invariants(capsys):
    t0 = time.perf_counter()
    worst_row, causal_leak, pad_leak, n_inputs = 0.0, 0.0, 0.0, 0
    for r_d in (1, 2):
        cfg = ModelConfig(r_d=r_d, n_mels=20)
        model = VTN(cfg, "vc", r_d)
        rng = np.random.default_rng(100 + r_d)
        with ad.no_grad():
            for _ in range(10):
                b = 10
                in_len = rng.integers(1, 30, b)
                out_len = rng.integers(1, 30, b)
                src = rng.normal(size=(b, in_len.max(), cfg.n_mels))
                tgt = rng.normal(size=(b, out_len.max(), cfg.n_mels))
                memory, enc_len, enc_w = model.encode(src, in_len)
                out = model.decode_teacher_forced(memory, enc_len, tgt, out_len)
                steps = out.steps
                n_inputs += b
                for w in enc_w:
                    q = length_mask(enc_len, w.shape[-1])
                    rows = w.data.sum(-1)
                    worst_row = max(worst_row, np.abs(rows - 1)[np.broadcast_to(q[:, None, :], rows.shape)].max())
                    pad_leak = max(pad_leak, np.abs(w.data * ~q[:, None, None, :]).max())
                for w in out.self_attn:
                    s = w.shape[-1]
                    q = length_mask(steps, s)
                    rows = w.data.sum(-1)
                    worst_row = max(worst_row, np.abs(rows - 1)[np.broadcast_to(q[:, None, :], rows.shape)].max())
                    upper = np.triu(np.ones((s, s), bool), 1)
                    causal_leak = max(causal_leak, np.abs(w.data[..., upper]).max() if upper.any() else 0.0)
                for w in out.src_attn:
                    q = length_mask(steps, w.shape[-2])
                    k = length_mask(enc_len, w.shape[-1])
                    rows = w.data.sum(-1)
                    worst_row = max(worst_row, np.abs(rows - 1)[np.broadcast_to(q[:, None, :], rows.shape)].max())
                    pad_leak = max(pad_leak, np.abs(w.data * ~k[:, None, None, :]).max())
    elapsed = time.perf_counter() - t0
    ok = worst_row <= 1e-9 and causal_leak == 0.0 and pad_leak == 0.0 and elapsed < 60
    verdict(capsys, 2, ok, f"{n_inputs} inputs (r_d 1,2): max |row sum - 1| {worst_row:.1e}, "
                           f"causal leak {causal_leak}, padding leak {pad_leak}, {elapsed:.1f}s")


# ------------------------------------------------------------------- 3

def test_3_reduction_factor_algebra(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    bad = []
    for r in range(1, 5):
        cfg = ModelConfig(enc_layers=1, dec_layers=1, heads=2, d_model=8, d_ff=8, n_mels=3, r_e=r,
                          prenet_units=4, postnet_channels=2, postnet_layers=1)
        model = VTN(cfg, "vc", 0)
        for t in range(1, 65):
            x = rng.normal(size=(t, 3))
            s = stack_frames(x, r)
            if s.shape != (math.ceil(t / r), 3 * r) or not np.array_equal(unstack_frames(s, r, t), x):
                bad.append(("round trip", t, r))
            if stacked_length(t, r) != math.ceil(t / r):
                bad.append(("length", t, r))
            with ad.no_grad():
                h, lens, _ = model.encode(x[None], [t])
            if h.shape[1] != math.ceil(t / r) or int(lens[0]) != math.ceil(t / r):
                bad.append(("encoder", t, r))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 3, not bad and elapsed < 60, f"T=1..64 x r=1..4, {len(bad)} failures {bad[:3]}, "
                                                  f"{elapsed:.1f}s")


# ------------------------------------------------------------------- 4

def test_4_frozen_decoder(capsys, pretrained):
    pre, _ = pretrained
    before, after = pre.tts.checkpoint.params, pre.encoder.checkpoint.params
    frozen = [k for k in before if not k.startswith("encoder.")]
    changed = [k for k in frozen if before[k].tobytes() != after[k].tobytes()]
    enc_moved = sum(not np.array_equal(before[k], after[k]) for k in before if k.startswith("encoder.layers"))
    ok = not changed and enc_moved > 0
    verdict(capsys, 4, ok, f"{len(frozen)} decoder/postnet tensors, {len(changed)} changed byte-wise; "
                           f"{enc_moved} encoder tensors trained")


# ------------------------------------------------------------------- 5

def test_5_overfit(capsys, overfit_run):
    pairs, out, elapsed = overfit_run
    totals = [r["total"] for r in out.result.records]
    ref = totals[9]
    best = min(totals[:2000])
    first = next((i + 1 for i, v in enumerate(totals) if v < 0.1 * ref), None)
    res = synthesize_tts(out.model, pairs.inputs[0])
    l1 = free_running_l1(res.mel, pairs.targets[0])
    ok = best < 0.1 * ref and l1 < 0.2 and elapsed < 900
    verdict(capsys, 5, ok, f"total {ref:.3f} at step 10 -> min {best:.3f} ({best / ref:.1%}), below 10% from "
                           f"step {first}; free-running L1 {l1:.3f} ({res.frames} vs {len(pairs.targets[0])} "
                           f"frames); {elapsed:.0f}s")


# ------------------------------------------------------------------- 6

def test_6_transfer_trend(capsys, ablation):
    result, elapsed = ablation
    cfg = result.config
    big, small = max(cfg.sizes), min(cfg.sizes)
    wins = sum(result.get("encoder+decoder", big, s).mcd <= result.get("scratch", big, s).mcd for s in cfg.seeds)
    drop_full = result.mean_mcd("encoder+decoder", small) - result.mean_mcd("encoder+decoder", big)
    drop_dec = result.mean_mcd("decoder", small) - result.mean_mcd("decoder", big)
    need = math.ceil(0.8 * len(cfg.seeds))
    ok = wins >= need and drop_full < drop_dec and elapsed < 7200
    with capsys.disabled():
        print("\n" + result.table(), end="")
    verdict(capsys, 6, ok, f"enc+dec <= scratch in {wins}/{len(cfg.seeds)} seeds at {big} utts; "
                           f"degradation {big}->{small}: enc+dec {drop_full:+.3f} dB vs decoder {drop_dec:+.3f} dB; "
                           f"{elapsed / 60:.1f} min")


# ------------------------------------------------------------------- 7

def test_7_convergence_speed(capsys, ablation):
    result, _ = ablation
    cfg = result.config
    big = max(cfg.sizes)
    pairs = [(result.get("encoder+decoder", big, s).steps_to_threshold,
              result.get("scratch", big, s).steps_to_threshold) for s in cfg.seeds]
    ok = all(p < q for p, q in pairs)
    shown = ", ".join(f"{p:g}/{q:g}" for p, q in pairs)
    verdict(capsys, 7, ok, f"steps to val L1 <= {cfg.threshold} (enc+dec/scratch) per seed: {shown}")


# ------------------------------------------------------------------- 8

def test_8_evaluation_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    dtw_bad = 0
    for _ in range(100):
        n, m = rng.integers(1, 9, 2)
        a, b = rng.normal(size=(n, 5)), rng.normal(size=(m, 5))
        _, cost = dtw_align(a, b)
        dist = np.sqrt(((a[:, None, 1:] - b[None, :, 1:]) ** 2).sum(-1))
        dtw_bad += not math.isclose(cost, min(all_path_costs(dist)), rel_tol=1e-12, abs_tol=1e-12)
    x = rng.normal(size=(10, 25))
    path, _ = dtw_align(x, x)
    same = mcd(x, x, path)
    y = x.copy()
    y[:, 5] += 1.0
    unit_err = abs(mcd(x, y, [(i, i) for i in range(10)]) - MCD_CONST * math.sqrt(2))
    diag = guided_attention_loss([ad.Tensor(np.eye(12)[None, None])], 0.4, {(0, 0)}).item()
    uni = guided_attention_loss([ad.Tensor(np.full((1, 1, 12, 9), 1 / 9))], 0.4, {(0, 0)}).item()
    elapsed = time.perf_counter() - t0
    ok = dtw_bad == 0 and same == 0.0 and unit_err < 1e-9 and diag == 0.0 and uni > 0 and elapsed < 60
    verdict(capsys, 8, ok, f"DTW brute-force mismatches {dtw_bad}/100; MCD(x,x)={same}; unit error "
                           f"{unit_err:.1e}; GA diagonal {diag}, uniform {uni:.4f}; {elapsed:.1f}s")


# ------------------------------------------------------------------- 9

def _tiny_run(log_path):
    from helpers import TINY
    pairs = tts_pairs(tiny_corpus()["a"])
    cfg = TrainConfig(batch_size=3, max_steps=12, warmup=4, val_interval=4, seed=7, stage="tts")
    return pretrain_decoder(pairs, TINY, cfg, val=pairs, log_to=TrainLog(log_path, wall_time=False))


def test_9_determinism_and_provenance(capsys, tmp_path):
    a = _tiny_run(tmp_path / "a.jsonl")
    b = _tiny_run(tmp_path / "b.jsonl")
    same_ckpt = a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    same_log = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    a.checkpoint.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    round_trip = loaded.to_bytes() == a.checkpoint.to_bytes() and all(
        loaded.params[k].tobytes() == v.tobytes() for k, v in a.checkpoint.params.items())
    write_matrix(tmp_path / "f.feat", np.ones((3, 80)), FeatureConfig().digest())
    try:
        read_matrix(tmp_path / "f.feat", FeatureConfig(hop=128).digest())
        stale = False
    except StaleCacheError:
        stale = True
    ok = same_ckpt and same_log and round_trip and stale
    verdict(capsys, 9, ok, f"checkpoints identical {same_ckpt}, logs identical {same_log}, "
                           f"round trip exact {round_trip}, stale cache rejected {stale}")


# ------------------------------------------------------------------- 10

def test_10_incremental_equivalence(capsys, overfit_run, pretrained, ablation, transfer_setup):
    pairs, overfit, _ = overfit_run
    pre, _ = pretrained
    result, _ = ablation
    cfg, setup = transfer_setup
    text = pairs.inputs[0]
    speech = setup.val_source.load_all()[0]
    checks = [("overfit-tts", overfit.checkpoint, text), ("tts", pre.tts.checkpoint, text),
              ("encoder-pretrain", pre.encoder.checkpoint, speech)]
    checks += [(f"vc-{r.init}-{r.size}-{r.seed}", r.checkpoint, speech) for r in result.runs]
    devs = {name: incremental_equivalence_check(ck.build_model(), src) for name, ck, src in checks}
    top = max(devs, key=devs.get)
    ok = devs[top] < 1e-10
    verdict(capsys, 10, ok, f"{len(devs)} checkpoints, max cached-vs-recomputed deviation {devs[top]:.1e} ({top})")
