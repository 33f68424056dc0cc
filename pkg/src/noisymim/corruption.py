"""Mask generation, the diffusion noise schedule, and corruption strategies.

Three strategies are supported:

* ``mim``      — masked rows are replaced by the learnable token θ; nothing
                 else is touched.
* ``diffused`` — masked rows are replaced by diffusion-noised versions of
                 themselves (no θ anywhere).
* ``hybrid``   — masked rows get θ at the embedding layer, and the remaining
                 visible rows get diffusion noise at the configured encoder
                 block.

Mask orientation is fixed globally as M=1 ⇒ masked/hidden.  (The source
formulations are inconsistent about whether M selects visible or hidden
tokens; one convention is pinned here and used everywhere.)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, as_tensor

STRATEGIES = ("mim", "diffused", "hybrid")

# purpose tags for derived per-step rng streams
STREAM_INIT = 0
STREAM_DATA = 1
STREAM_MASK = 2
STREAM_TIME = 3
STREAM_NOISE = 4
STREAM_SYNTH = 5
STREAM_PROBE = 6


class Rng:
    """Counter-based generator: identical (seed, stream) gives an identical
    draw sequence on every platform (numpy Philox)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @classmethod
    def for_step(cls, seed: int, purpose: int, step: int) -> "Rng":
        """Substream keyed by (purpose, step) so per-step draws are
        independent of history."""
        return cls(seed, (int(purpose) << 40) | int(step))

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass
class MaskSpec:
    """Binary token mask (1 = masked/hidden) plus the derived index sets."""

    mask: np.ndarray
    gamma: float
    masked_idx: np.ndarray
    noisy_visible_idx: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.mask.shape[0])


def generate_mask(rng: Rng, num_tokens: int, gamma: float, noise_visible: bool = True) -> MaskSpec:
    """Uniform mask without replacement: shuffle indices, take a prefix of
    exactly round(gamma * num_tokens).

    ``noise_visible`` controls whether the complement of the masked set is
    recorded as the noisy-visible index set (hybrid/diffused strategies) or
    left empty (plain MIM, where no timestep is drawn).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"mask ratio must be in [0,1], got {gamma}")
    n_masked = int(round(gamma * num_tokens))
    perm = rng.permutation(num_tokens)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    mask = np.zeros(num_tokens, dtype=np.float64)
    mask[masked] = 1.0
    noisy = visible if noise_visible else np.array([], dtype=np.int64)
    return MaskSpec(mask=mask, gamma=gamma, masked_idx=masked.astype(np.int64),
                    noisy_visible_idx=noisy.astype(np.int64))


def masked_row_matrix(masks, num_tokens: int) -> np.ndarray:
    """0/1 matrix of masked rows: [L] for one MaskSpec, [N, L] for a batch."""
    if isinstance(masks, MaskSpec):
        return masks.mask
    return np.stack([m.mask for m in masks])


def noisy_row_matrix(masks, num_tokens: int) -> np.ndarray:
    """0/1 matrix of noisy-visible rows, same shape convention as above."""
    def one(m: MaskSpec) -> np.ndarray:
        row = np.zeros(num_tokens, dtype=np.float64)
        row[m.noisy_visible_idx] = 1.0
        return row

    if isinstance(masks, MaskSpec):
        return one(masks)
    return np.stack([one(m) for m in masks])


@dataclass
class NoiseSchedule:
    """β table over T steps and the cumulative signal retention ᾱ.

    alpha_bar[0] = 1 and alpha_bar[t] = Π_{s≤t}(1 − β_s), so single-shot
    noising with ᾱ_t matches t sequential per-step applications in
    distribution.
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        ab = np.empty(self.T + 1, dtype=np.float64)
        ab[0] = 1.0
        np.cumprod(1.0 - self.beta, out=ab[1:])
        self.alpha_bar = ab

    def signal_scale(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[t])

    def noise_scale(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[t])


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear β schedule: beta[t] = beta_start + (t−1)/(T−1)·(beta_end−beta_start)."""
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = beta_start + np.arange(T, dtype=np.float64) / (T - 1) * (beta_end - beta_start)
    return NoiseSchedule(T=T, beta=beta)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 0 <= t <= sched.T:
        raise ContractError(f"timestep {t} outside [0, {sched.T}]")


def add_noise(x, t: int, sched: NoiseSchedule, rng: Rng) -> tuple[Tensor, np.ndarray]:
    """Single-shot forward noising: √ᾱ_t·x + √(1−ᾱ_t)·ε with ε ~ N(0, I).

    t=0 is the identity edge (ᾱ₀ = 1): returns x unchanged and ε = 0.
    Returns ε so callers may build ε-prediction targets.
    """
    _check_t(t, sched)
    x = as_tensor(x)
    if t == 0:
        return x, np.zeros(x.shape)
    eps = rng.normal(x.shape)
    a = float(sched.signal_scale(t))
    b = float(sched.noise_scale(t))
    return x * a + eps * b, eps


def diffused_corrupt(x, mask: MaskSpec | list, t, sched: NoiseSchedule, rng: Rng) -> Tensor:
    """Replace masked rows with their noised versions; visible rows untouched.

    `t` may be a scalar or a per-sample array when `x` is batched [N, L, D].
    """
    x = as_tensor(x)
    return _noise_rows(x, masked_row_matrix(mask, x.shape[-2]), t, sched, rng)


def feature_noise(features, mask: MaskSpec | list, t, sched: NoiseSchedule, rng: Rng) -> Tensor:
    """Noise only the rows in the noisy-visible index set (hybrid strategy)."""
    features = as_tensor(features)
    return _noise_rows(features, noisy_row_matrix(mask, features.shape[-2]), t, sched, rng)


def _noise_rows(x: Tensor, rows: np.ndarray, t, sched: NoiseSchedule, noise_source) -> Tensor:
    """x·(1−m) + (√ᾱ_t·x + √(1−ᾱ_t)·ε)·m over the row indicator m.

    `noise_source` is an Rng, or a pre-drawn ε array when the caller needs
    the result to be a pure function of x (gradient verification).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr > sched.T):
        raise ContractError(f"timestep outside [0, {sched.T}]")
    if rows.sum() == 0 or np.all(t_arr == 0):
        return x
    eps = noise_source if isinstance(noise_source, np.ndarray) else noise_source.normal(x.shape)
    a = sched.signal_scale(t_arr)  # per-sample when t is a vector
    b = sched.noise_scale(t_arr)
    if np.ndim(t) > 0:
        a = a.reshape((-1,) + (1,) * (x.ndim - 1))
        b = b.reshape((-1,) + (1,) * (x.ndim - 1))
    else:
        a = float(a[0])
        b = float(b[0])
    m = rows[..., None]
    return x * (1.0 - m) + (x * a + eps * b) * m


def hybrid_corrupt(embedding, mask, theta, pos, cls_offset: int = 0) -> Tensor:
    """θ-substitution half of hybrid masking, applied at the embedding layer.

    The noising half runs later, at the configured encoder block, via
    :func:`feature_noise`.
    """
    from .encoder import apply_mask_tokens

    return apply_mask_tokens(embedding, mask, theta, pos, cls_offset=cls_offset)
