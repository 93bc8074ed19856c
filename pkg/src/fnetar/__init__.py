"""Autoregressive Fourier token mixing in a segment-recurrent language model."""

from .data import SegmentStream, Vocab, build_vocab
from .mixing import (
    MixingOperator,
    apply_mixing,
    attention_forward,
    build_causal_mask,
    build_fnet_matrix,
    build_fnetar_matrix,
    dft_naive,
    fft_radix2,
    verify_causality,
)
from .model import MemoryState, ModelConfig, forward_segment, init_model, param_count, update_memory
from .numerics import Tensor, backward, finite_diff_check
from .training import TrainConfig, evaluate_perplexity, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
