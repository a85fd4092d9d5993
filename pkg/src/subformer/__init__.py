"""Parameter-efficient transformer with factorized (SAFE) embeddings and
sandwich-style cross-layer weight sharing, built on a small float64
reverse-mode autodiff core."""

import os

# Single-threaded BLAS keeps reruns bit-identical (and is faster at this
# scale anyway). Only effective if numpy has not been imported yet.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del os, _var

from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     DegenerateBatchError, DimensionError, DivergenceError,
                     LengthError, SubformerError, VocabError)
from .tensor import Rng, Tape, Tensor, backward, grad_check, no_grad
from .nn import (AttentionParams, FeedForwardParams, LayerNormParams, Mask,
                 TransformerLayer, causal_mask, multi_head_attention,
                 padding_mask, sinusoidal_pe)
from .model import (ModelConfig, ParameterRegistry, SafeEmbedding, Subformer,
                    SubformerLM, build, decoder_forward, encoder_forward,
                    forward, lm_forward, output_logits, randomize_params,
                    safe_forward, share_map)
from .params import ParamBreakdown, count_actual, count_params, unshared_total
from .training import (AdamState, Metrics, ToyTask, TrainConfig, adam_step,
                       char_lm_dataset, evaluate, gen_task_batch, greedy_decode,
                       inverse_sqrt_lr, train_loop, unigram_perplexity)

__version__ = "0.1.0"
