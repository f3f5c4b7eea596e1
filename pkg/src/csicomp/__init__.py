"""End-to-end trainable CSI feedback compression at desk scale."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .channel import (AngularDelayChannel, DatasetFile, NormalizationRecord,
                      SpatialFrequencyChannel, build_dataset, load_dataset,
                      save_dataset)
from .coding import (FeedbackBitstream, HuffmanCodebook, SymbolHistogram,
                     estimate_rate, fit_histogram, huffman_build, huffman_decode,
                     huffman_encode, soft_rate)
from .model import ModelConfig, attention_cost, decode, encode, init_params
from .quantizer import QuantizedLatent, QuantizerConfig, dequantize, mu_compress, \
    mu_expand, quantize, ste_quantize
from .training import AdamState, TrainConfig, adam_step, evaluate, fit, loss, nmse

__version__ = "0.1.0"
