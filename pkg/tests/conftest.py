import numpy as np
import pytest

from dynact.model import ModelConfig, LayerWeights, weights_from_tensors
from dynact.tensor import F32
from dynact.weights_io import random_weights


def make_weights(config: ModelConfig, seed: int = 0):
    """In-memory random model (no file round trip)."""
    return weights_from_tensors(random_weights(config, seed), config)


def ffn_layer(gate, up, down) -> LayerWeights:
    """LayerWeights with hand-chosen FFN tensors; attention parts are dummies
    with consistent shapes (FFN-only tests never touch them)."""
    gate = np.asarray(gate, dtype=F32)
    up = np.asarray(up, dtype=F32)
    down = np.asarray(down, dtype=F32)
    d_model = gate.shape[1]
    eye = np.eye(d_model, dtype=F32)
    ones = np.ones(d_model, dtype=F32)
    return LayerWeights(
        attn_q=eye, attn_k=eye, attn_v=eye, attn_o=eye,
        ffn_gate=gate, ffn_up=up, ffn_down=down,
        norm1_gain=ones, norm2_gain=ones,
    )


def random_ffn_layer(rng, d_model: int, d_ff: int) -> LayerWeights:
    return ffn_layer(
        rng.standard_normal((d_ff, d_model)) / np.sqrt(d_model),
        rng.standard_normal((d_ff, d_model)) / np.sqrt(d_model),
        rng.standard_normal((d_model, d_ff)) / np.sqrt(d_ff),
    )


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        n_layers=2, d_model=32, d_ff=64, n_heads=4, vocab_size=257, max_seq_len=128
    )


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return make_weights(tiny_config, seed=0)
