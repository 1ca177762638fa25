"""Bidirectional attentional encoder-decoder for abstractive summarisation.

Numpy-only: a small reverse-mode autodiff layer, LSTM encoder/decoders,
joint forward/backward training, beam and bidirectional beam search, and
ROUGE scoring.
"""

from .decoding import BeamConfig, bbs_decode, beam_search, greedy_decode
from .model import ModelConfig, count_parameters, encode, init_params, sequence_logprob
from .rouge import rouge_l, rouge_n
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BeamConfig", "ModelConfig", "TrainConfig", "bbs_decode", "beam_search", "greedy_decode",
    "count_parameters", "encode", "init_params", "sequence_logprob", "rouge_l", "rouge_n", "train",
]
