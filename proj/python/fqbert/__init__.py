"""Bit-exact fully quantized BERT kernels, encoder and performance model."""

from ._fqbert import *  # noqa: F401,F403
from ._fqbert import FqbertError, ModelConfig, HwConfig, SyntheticModel  # noqa: F401


def toy_config(layers=1, hidden=16, heads=2, ffn=32, seq_len=8, vocab=50, w_bits=4):
    """Small model shape for quick experiments."""
    mc = ModelConfig()
    mc.num_layers = layers
    mc.hidden = hidden
    mc.heads = heads
    mc.head_dim = hidden // heads
    mc.ffn_dim = ffn
    mc.seq_len = seq_len
    mc.vocab_size = vocab
    mc.max_position = max(seq_len, 16)
    mc.w_bits = w_bits
    return mc
