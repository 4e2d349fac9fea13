"""Session fixtures shared by the long-running acceptance checks."""

import time

import pytest

from vtn.corpus import Language, SyntheticSpeaker, generate_corpus
from vtn.experiments import ExperimentConfig, build_setup, run_ablation, run_pretraining
from vtn.model import ModelConfig
from vtn.training import TrainConfig, pretrain_decoder, tts_pairs


@pytest.fixture(scope="session")
def overfit_run():
    """Full-size TTS model trained on 20 synthetic utterances for 2000 steps."""
    lang = Language.create(seed=0)
    man = generate_corpus([SyntheticSpeaker.create("tts", 1, lang)], 20, seed=3)["tts"]
    pairs = tts_pairs(man)
    t0 = time.perf_counter()
    out = pretrain_decoder(pairs, ModelConfig(), TrainConfig(max_steps=2000, warmup=200, lr_scale=0.5,
                                                             seed=0, stage="tts"))
    return pairs, out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def transfer_setup():
    cfg = ExperimentConfig()
    return cfg, build_setup(cfg)


@pytest.fixture(scope="session")
def pretrained(transfer_setup):
    cfg, setup = transfer_setup
    t0 = time.perf_counter()
    pre = run_pretraining(setup, cfg)
    return pre, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ablation(transfer_setup, pretrained):
    """Every initialisation x training size x seed of the default experiment."""
    cfg, setup = transfer_setup
    pre, pre_time = pretrained
    t0 = time.perf_counter()
    result = run_ablation(cfg, pre=pre, setup=setup)
    return result, pre_time + time.perf_counter() - t0
