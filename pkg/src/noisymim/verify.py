"""End-to-end gradient verification against central finite differences.

Every parameter of a tiny encoder is perturbed coordinate-by-coordinate for
each loss component separately; the corruption draws (masks, timesteps, ε)
are pinned so the forward pass is a pure function of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tz
from .config import TrainConfig
from .corruption import STREAM_INIT, Rng, build_schedule, generate_mask
from .encoder import Encoder, EncoderConfig, patchify
from .errors import ContractError
from .objectives import denoise_loss, disruption_loss, mim_loss
from .tensor import Tensor, backward, grad_check, zero_grad
from .trainer import _patch_targets, make_corruption_hook

COMPONENTS = ("l_mim", "l_denoise", "l_disrupt")
THRESHOLD = 1e-4


@dataclass
class ComponentReport:
    name: str
    worst_err: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.worst_err < THRESHOLD


def tiny_config() -> TrainConfig:
    """The verification config: image 8x8, patch 4, dim 8, depth 2, heads 2."""
    enc = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
                        noise_block=1, strategy="hybrid", mask_ratio=0.5,
                        disruption_weight=0.1, denoise_weight=1.0)
    return TrainConfig(encoder=enc, batch_size=2, steps=1)


def op_family_checks(seed: int = 0, eps: float = 1e-5) -> list[tuple[str, float]]:
    """grad_check over each differentiable op family, composed to a scalar."""
    rng = Rng(seed, 99)
    x34 = Tensor(rng.normal((3, 4)))
    w45 = rng.normal((4, 5))
    mix = rng.normal((3, 4))  # non-uniform weighting so row-sum-1 ops keep gradients
    g4 = Tensor(rng.normal(4) * 0.5 + 1.5)
    b4 = Tensor(rng.normal(4))
    pos = Tensor(np.abs(rng.normal((3, 4))) + 0.5)

    cases = [
        ("matmul", lambda t: tz.matmul(t, Tensor(w45)).sum(), x34),
        ("softmax_rows", lambda t: (tz.softmax_rows(t) * mix).sum(), x34),
        ("layer_norm", lambda t: (tz.layer_norm(t, g4, b4) * mix).sum(), x34),
        ("add_sub_mul", lambda t: ((t + t) * t - t * 0.5).sum(), x34),
        ("gelu", lambda t: tz.gelu(t).sum(), x34),
        ("log", lambda t: tz.log(t).sum(), pos),
        ("sqrt", lambda t: tz.sqrt(t).sum(), pos),
        ("reductions", lambda t: (t.sum(axis=0) * 2.0).mean() + t.mean(), x34),
    ]
    return [(name, grad_check(fn, x, eps=eps)) for name, fn, x in cases]


def component_gradcheck(cfg: TrainConfig | None = None, eps: float = 1e-5,
                        corrupt: bool = False, seed: int = 0) -> list[ComponentReport]:
    """Central-difference check of every parameter for each loss component.

    `corrupt` deliberately perturbs one analytic gradient (negative-control
    hook for the verification gate itself).
    """
    cfg = cfg or tiny_config()
    c = cfg.encoder
    rng = Rng(seed, 7)
    enc = Encoder(c, Rng(cfg.seed, STREAM_INIT))
    sched = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    images = rng.normal((cfg.batch_size, c.channels, c.image_size, c.image_size))
    masks = [generate_mask(rng, c.num_image_tokens, c.mask_ratio,
                           noise_visible=c.strategy != "mim")
             for _ in range(cfg.batch_size)]
    ts = rng.integers(1, sched.T + 1, cfg.batch_size)
    eps_pin = rng.normal((cfg.batch_size, c.seq_len, c.embed_dim))
    target = _patch_targets(patchify(images, c.patch_size).data, cfg.normalize_per_patch)

    def compute(component: str) -> Tensor:
        emb = enc.embed_patches(patchify(images, c.patch_size))
        if c.strategy in ("mim", "hybrid"):
            emb = enc.mask_embedding(emb, masks)
        hook = make_corruption_hook(cfg, sched, masks, ts, eps_pin)
        feats, records = enc.forward(emb, hook, record_grad=True)
        pred = enc.predict(feats)
        if component == "l_mim":
            return mim_loss(pred, target, masks)
        if component == "l_denoise":
            return denoise_loss(pred, target, masks)
        if component == "l_disrupt":
            return disruption_loss(records, masks, cls_offset=c.cls_offset,
                                   layers=cfg.disrupt_layers, columns=cfg.disrupt_columns)
        raise ContractError(f"unknown component {component!r}")

    reports = []
    leaves = enc.leaves()
    for component in COMPONENTS:
        zero_grad(leaves)
        backward(compute(component), leaves)
        analytic = {name: p.grad.copy() for name, p in enc.params.items()}
        if corrupt:
            first = next(iter(analytic))
            analytic[first].reshape(-1)[0] += 1e-3
        worst_err, worst_param = 0.0, "-"
        for name, p in enc.params.items():
            num = np.empty(p.size)
            with tz.no_grad():
                it = np.nditer(p.data, flags=["multi_index"])
                for i, _ in enumerate(it):
                    where = it.multi_index
                    orig = p.data[where]
                    p.data[where] = orig + eps
                    hi = compute(component).item()
                    p.data[where] = orig - eps
                    lo = compute(component).item()
                    p.data[where] = orig
                    num[i] = (hi - lo) / (2.0 * eps)
            ana = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-12)
            err = float(np.max(np.abs(ana - num) / denom))
            if err > worst_err:
                worst_err, worst_param = err, name
        reports.append(ComponentReport(name=component, worst_err=worst_err, worst_param=worst_param))
    return reports
