"""Toy-scale masked-image pre-training with feature-level noise injection,
explicit masked/noised token disentanglement, and attention diagnostics."""

from .analysis import HeadKLRecord, ProbeResult, attention_map, head_distribution, head_kl, linear_probe
from .config import TrainConfig, apply_overrides, load_config
from .corruption import (MaskSpec, NoiseSchedule, Rng, add_noise, build_schedule,
                         diffused_corrupt, feature_noise, generate_mask, hybrid_corrupt)
from .data import Dataset, SynthSpec, build_synthetic_dataset, gen_synthetic, load_cifar10
from .encoder import (AffinityRecord, Encoder, EncoderConfig, apply_mask_tokens, attention,
                      embed, encoder_forward, patchify, predict_pixels, unpatchify)
from .errors import (ConfigError, ContractError, DataError, DimensionError, DomainError,
                     FormatError, NoisyMimError, NumericsError)
from .objectives import LossReport, denoise_loss, disruption_loss, mim_loss, total_loss
from .optim import OptimizerState, adamw_step, lr_at
from .tensor import Tensor, backward, grad_check, layer_norm, matmul, no_grad, softmax_rows, zero_grad
from .trainer import RunArtifacts, load_encoder, pretrain

__version__ = "0.1.0"
