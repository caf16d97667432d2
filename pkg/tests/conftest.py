from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from app.core import ops
from app.core.config import CorpusConfig, EvalConfig, ProbeConfig, TrainConfig
from app.core.models import ModelConfig, build_model
from app.core.tensor import Tape, Tensor, precision
from app.services.corpus import generate_corpus, generate_trials


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Différences centrées de ``f`` par rapport à ``x`` (modifié en place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], rtol: float = 1e-3, atol: float = 1e-6) -> None:
    """Compare la rétro-propagation de sum(op(*inputs) * r) aux différences finies, en float64."""
    with precision(np.float64):
        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        with Tape() as tape:
            out = op(*tensors)
            r = Tensor(np.random.default_rng(0).standard_normal(out.shape))
            loss = ops.sum(ops.mul(out, r))
        tape.backward(loss)
        for t in tensors:
            def f() -> float:
                return float(np.sum(op(*[Tensor(u.data) for u in tensors]).data * r.data))

            expected = numeric_grad(f, t.data)
            assert t.grad is not None
            np.testing.assert_allclose(t.grad, expected, rtol=rtol, atol=atol)


@pytest.fixture
def small_corpus_config() -> CorpusConfig:
    return CorpusConfig(
        train_speakers=4,
        test_speakers=3,
        utterances=6,
        train_frames=40,
        trial_frames=120,
        feat_dim=16,
        latent_dim=8,
    )


@pytest.fixture
def small_corpus(small_corpus_config):
    return generate_corpus(small_corpus_config, seed=7)


@pytest.fixture
def small_trials(small_corpus):
    return generate_trials(small_corpus, seed=7, per_speaker=4)


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(arch="ecapa-toy", channels=8, embed_dim=8, num_speakers=4, feat_dim=16, seed=3)


@pytest.fixture
def small_model(small_model_config):
    return build_model(small_model_config)


@pytest.fixture
def small_eval_config() -> EvalConfig:
    return EvalConfig(window=50, hop=30, top_k=3, trials_per_speaker=4)


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(stage="fp32", epochs=2, decay_epochs=(1,), batch_size=8)


@pytest.fixture
def quick_finetune_config() -> TrainConfig:
    return TrainConfig(stage="qat", epochs=1, decay_epochs=(), batch_size=8, scheme="uniform", bits=4)


@pytest.fixture
def quick_probe_config() -> ProbeConfig:
    return ProbeConfig(hidden=8, epochs=5, batch_size=8)
