"""Small shared builders for the test suite."""

import numpy as np

from vtn.corpus import Language, SyntheticSpeaker, generate_corpus
from vtn.model import ModelConfig

TINY = ModelConfig(enc_layers=1, dec_layers=1, heads=2, d_model=16, d_ff=32, n_mels=12, vocab_size=8,
                   prenet_units=16, postnet_channels=8, postnet_layers=2, postnet_kernel=3)


def tiny_corpus(n=6, n_mels=12, alphabet=6, seed=0):
    lang = Language.create(alphabet, n_mels=n_mels, seed=seed)
    spk = [SyntheticSpeaker.create("a", 1, lang), SyntheticSpeaker.create("b", 2, lang, formant_shift=1.0,
                                                                           duration_scale=1.2)]
    return generate_corpus(spk, n, (2, 4), seed=seed)


def random_mel(rng, t, n_mels=12):
    return rng.normal(size=(t, n_mels))
