import numpy as np
import pytest

from codeunlearn import autodiff as ad
from codeunlearn.lm import LmConfig, LmModel
from codeunlearn.trainers import UnlearnExample


def tiny_model(seed=0, vocab=7, context=4, embed=3, hidden=5, scale=1.0):
    m = LmModel(LmConfig(vocab_size=vocab, context_len=context, embed_dim=embed, hidden_dim=hidden, seed=seed))
    if scale != 1.0:
        for p in m.parameters():
            p.data *= scale
    return m


def random_examples(rng, n=3, vocab=7, max_prompt=3, max_len=4, template=True):
    out = []
    for i in range(n):
        x = rng.integers(3, vocab, size=int(rng.integers(0, max_prompt + 1))).tolist()
        y = rng.integers(3, vocab, size=int(rng.integers(1, max_len + 1))).tolist()
        t = rng.integers(3, vocab, size=int(rng.integers(1, max_len + 1))).tolist() if template else None
        out.append(UnlearnExample(f"ex{i}", x, y, t))
    return out


def analytic_grads(fn, params):
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = fn()
    ad.backward(loss, tape)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def max_fd_rel_error(fn, params, rng, n_probe=12, h=1e-5):
    """Largest relative error between analytic and central-difference partials on random entries."""
    grads = analytic_grads(fn, params)
    worst = 0.0
    for _ in range(n_probe):
        k = int(rng.integers(len(params)))
        p, g = params[k], grads[k]
        i = tuple(int(rng.integers(s)) for s in p.data.shape)
        old = p.data[i]
        p.data[i] = old + h
        up = fn().item()
        p.data[i] = old - h
        down = fn().item()
        p.data[i] = old
        fd = (up - down) / (2 * h)
        err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
