import numpy as np
import pytest

from lertlab.corpus import AnnotatedSentence, Word, build_vocab, encode_sentence
from lertlab.masking import MaskingConfig, mask_sentence, sentence_rng
from lertlab.model import ModelConfig, collate, init_params

TINY_ROWS = [
    [("张三", "nh", "S-Nh", "SBV"), ("买", "v", "O", "HED"), ("书", "n", "O", "VOB"), ("。", "wp", "O", "WP")],
    [("北京", "ns", "S-Ns", "SBV"), ("很", "d", "O", "ADV"), ("大", "a", "O", "HED"), ("。", "wp", "O", "WP")],
    [("他", "r", "O", "SBV"), ("买", "v", "O", "HED"), ("大", "a", "O", "ATT"), ("书", "n", "O", "VOB"),
     ("！", "wp", "O", "WP")],
]


def tiny_corpus():
    return [AnnotatedSentence(tuple(Word(*r) for r in rows)) for rows in TINY_ROWS]


def gradcheck_setup(seed=0):
    """Micro model (L=2, d=8, A=2, V=20) in float64 with one masked batch."""
    corpus = tiny_corpus()
    vocab = build_vocab(corpus)
    assert len(vocab) <= 20
    cfg = ModelConfig(layers=2, hidden=8, heads=2, vocab=20, max_len=16)
    params = init_params(cfg, seed, np.float64)
    # spread the weights so every path carries a gradient well above round-off
    rng = np.random.default_rng(seed + 1)
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.1, params[name].shape)
    masking = MaskingConfig(mask_ratio=0.4)
    exs = [mask_sentence(encode_sentence(s, vocab, 16), sentence_rng(seed, 0, i), masking, vocab)
           for i, s in enumerate(corpus)]
    return cfg, params, collate(exs)


def finite_difference(params, loss_fn, eps=1e-5):
    out = {}
    for name, t in params.items():
        num = np.zeros_like(t)
        flat, nflat = t.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            nflat[j] = (up - down) / (2 * eps)
        out[name] = num
    return out


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def tiny():
    return tiny_corpus()
