"""Shared builders for the test suite."""
import numpy as np

from progstack.data import gen_markov
from progstack.model import ModelConfig, init_model


def perturbed_model(config: ModelConfig, seed: int = 0, dtype=np.float32, scale: float = 0.5):
    """A fresh model with every tensor moved off its init values (nonzero alphas included)."""
    params = init_model(config, seed, dtype)
    rng = np.random.default_rng(seed + 1)
    for name, t in params.named_tensors().items():
        noise = rng.normal(0, scale, size=t.shape)
        if name.endswith("alpha"):
            t[...] = rng.normal(0.5, 0.3)
        elif "gamma" in name:
            t[...] = (1 + 0.2 * noise).astype(dtype)
        elif "conv" not in name:
            t[...] = (t + noise).astype(dtype)
    return params


def small_config(vocab=30, k=8, t=10, blocks=2, dilations=(1, 2)):
    return ModelConfig(vocab_size=vocab, embed_dim=k, max_len=t, base_dilations=dilations,
                       num_blocks=blocks)


def markov(vocab=30, sessions=200, t=10, seed=0, **kw):
    return gen_markov(vocab, sessions, t, seed=seed, **kw)


# acceptance outcomes, echoed in the terminal summary by conftest
ACCEPTANCE: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok
