"""The pre-training loop: corruption → encoder → objectives → AdamW.

Every random draw comes from a Philox substream keyed by (seed, purpose,
step), so a (seed, config) pair fully determines each mask, timestep, ε and
the whole parameter trajectory; two runs with the same seed produce
bit-identical checkpoints.
"""

from __future__ import annotations

import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_from_items, config_items
from .corruption import (STREAM_DATA, STREAM_INIT, STREAM_MASK, STREAM_NOISE, STREAM_SYNTH,
                         STREAM_TIME, NoiseSchedule, Rng, build_schedule, diffused_corrupt,
                         feature_noise, generate_mask)
from .data import Dataset, SynthSpec, build_synthetic_dataset, load_cifar10
from .encoder import Encoder, patchify
from .errors import FormatError, NumericsError
from .objectives import (LossReport, denoise_loss, disruption_loss, mim_loss, token_counts,
                         total_loss)
from .optim import OptimizerState, adamw_step, lr_at
from .tensor import backward, zero_grad

CHECKPOINT_NAME = "checkpoint.nmim"
LOSS_CSV_NAME = "loss.csv"
MANIFEST_NAME = "manifest.txt"
LOSS_CSV_HEADER = "step,l_mim,l_denoise,l_disrupt,total,lr"


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint_path: Path
    loss_csv_path: Path
    manifest_path: Path
    steps_run: int
    final_report: LossReport | None


def load_dataset(cfg: TrainConfig) -> Dataset:
    if cfg.data_kind == "cifar10":
        return load_cifar10(cfg.data_path)
    spec = SynthSpec(classes=cfg.data_classes, size=cfg.encoder.image_size,
                     noise_std=cfg.data_noise_std)
    return build_synthetic_dataset(spec, cfg.data_samples_per_class, Rng(cfg.data_seed, STREAM_SYNTH))


def _patch_targets(patches: np.ndarray, normalize_per_patch: bool) -> np.ndarray:
    if not normalize_per_patch:
        return patches
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + 1e-6)


def make_corruption_hook(cfg: TrainConfig, sched: NoiseSchedule, masks, ts, noise_source):
    """The block-k hook for the configured strategy.

    `noise_source` is either an Rng or a pinned ε array (used by the
    gradient-verification path, where the forward must be a pure function
    of the parameters).
    """
    strategy = cfg.encoder.strategy
    if strategy == "mim":
        return None
    if strategy == "diffused":
        return lambda f: diffused_corrupt(f, masks, ts, sched, noise_source)
    return lambda f: feature_noise(f, masks, ts, sched, noise_source)


def forward_step(enc: Encoder, cfg: TrainConfig, sched: NoiseSchedule, images: np.ndarray,
                 masks, ts, noise_source) -> LossReport:
    """One corrupted forward pass plus the combined loss for a batch."""
    c = enc.config
    patches = patchify(images, c.patch_size)
    target = _patch_targets(patches.data, cfg.normalize_per_patch)
    emb = enc.embed_patches(patches)
    if c.strategy in ("mim", "hybrid"):
        emb = enc.mask_embedding(emb, masks)
    hook = make_corruption_hook(cfg, sched, masks, ts, noise_source)
    feats, records = enc.forward(emb, hook, record_grad=c.disruption_weight > 0)
    pred = enc.predict(feats)
    l_m = mim_loss(pred, target, masks)
    l_n = denoise_loss(pred, target, masks)
    l_d = disruption_loss(records, masks, cls_offset=c.cls_offset,
                          layers=cfg.disrupt_layers, columns=cfg.disrupt_columns)
    return total_loss(l_m, l_n, l_d, c.denoise_weight, c.disruption_weight,
                      token_counts(masks, c.num_image_tokens))


def draw_step_batch(cfg: TrainConfig, images_norm: np.ndarray, step: int):
    """(images, indices, masks, timesteps, noise rng) for one step, each from
    its own (seed, purpose, step) substream."""
    c = cfg.encoder
    data_rng = Rng.for_step(cfg.seed, STREAM_DATA, step)
    idx = data_rng.integers(0, images_norm.shape[0], cfg.batch_size)
    imgs = images_norm[idx]
    if cfg.flip_augment:
        flips = data_rng.uniform(shape=cfg.batch_size) < 0.5
        imgs[flips] = imgs[flips][..., ::-1]
    mask_rng = Rng.for_step(cfg.seed, STREAM_MASK, step)
    masks = [generate_mask(mask_rng, c.num_image_tokens, c.mask_ratio,
                           noise_visible=c.strategy != "mim")
             for _ in range(cfg.batch_size)]
    if c.strategy == "mim":
        ts = np.zeros(cfg.batch_size, dtype=np.int64)
    else:
        time_rng = Rng.for_step(cfg.seed, STREAM_TIME, step)
        ts = time_rng.integers(1, cfg.timesteps + 1, cfg.batch_size)
    noise_rng = Rng.for_step(cfg.seed, STREAM_NOISE, step)
    return imgs, idx, masks, ts, noise_rng


def save_train_checkpoint(path, cfg: TrainConfig, enc: Encoder, state: OptimizerState) -> None:
    blobs: dict[str, np.ndarray] = {name: p.data for name, p in enc.params.items()}
    blobs["opt.step"] = np.float64(state.step)
    for name in enc.params:
        blobs[f"opt.m.{name}"] = state.m[name]
        blobs[f"opt.v.{name}"] = state.v[name]
    save_checkpoint(path, config_items(cfg), blobs)


def load_train_checkpoint(path) -> tuple[TrainConfig, Encoder, OptimizerState]:
    items, blobs = load_checkpoint(path)
    cfg = config_from_items(items)
    enc = Encoder(cfg.encoder, Rng(cfg.seed, STREAM_INIT))
    state = OptimizerState.for_params(enc.params)
    for name, p in enc.params.items():
        if name not in blobs:
            raise FormatError(f"{path}: checkpoint missing parameter {name!r}")
        if blobs[name].shape != p.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {blobs[name].shape}, "
                              f"config implies {p.shape}")
        p.data = blobs[name]
        state.m[name] = blobs[f"opt.m.{name}"]
        state.v[name] = blobs[f"opt.v.{name}"]
    state.step = int(blobs["opt.step"].reshape(()))
    return cfg, enc, state


def load_encoder(path) -> tuple[Encoder, TrainConfig]:
    cfg, enc, _ = load_train_checkpoint(path)
    return enc, cfg


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def write_manifest(path, entries: list[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in entries))


def pretrain(cfg: TrainConfig, out_dir, command_line: str | None = None) -> RunArtifacts:
    """Run the full loop; writes checkpoint(s), loss CSV and a manifest.

    Aborts with NumericsError on a non-finite loss or gradient, dumping the
    last parameters and the offending batch indices first.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start_ts = time.strftime("%Y-%m-%dT%H:%M:%S")
    dataset = load_dataset(cfg)
    images_norm = dataset.normalized()
    sched = build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    enc = Encoder(cfg.encoder, Rng(cfg.seed, STREAM_INIT))
    state = OptimizerState.for_params(enc.params)
    leaves = enc.leaves()
    warmup = cfg.resolved_warmup

    ckpt_path = out / CHECKPOINT_NAME
    csv_path = out / LOSS_CSV_NAME
    manifest_path = out / MANIFEST_NAME
    rows = [LOSS_CSV_HEADER]
    report: LossReport | None = None

    def dump_abort(step: int, idx, reason: str):
        abort_path = out / "abort_checkpoint.nmim"
        save_train_checkpoint(abort_path, cfg, enc, state)
        csv_path.write_text("\n".join(rows) + "\n")
        finish(status=f"aborted at step {step}: {reason}", extra=[
            ("abort.step", str(step)),
            ("abort.batch_indices", ",".join(str(i) for i in idx)),
            ("abort.checkpoint", str(abort_path)),
        ])

    def finish(status: str, extra: list[tuple[str, str]] = ()):  # manifest is written once
        entries = [("command", command_line or "pretrain (library call)"),
                   ("status", status),
                   ("start_time", start_ts),
                   ("end_time", time.strftime("%Y-%m-%dT%H:%M:%S")),
                   ("seed", str(cfg.seed)),
                   ("git", git_describe()),
                   ("dataset.size", str(len(dataset))),
                   ("dataset.channel_mean", ",".join(repr(v) for v in dataset.channel_mean)),
                   ("dataset.channel_std", ",".join(repr(v) for v in dataset.channel_std)),
                   ("artifact.checkpoint", str(ckpt_path)),
                   ("artifact.loss_csv", str(csv_path))]
        entries += list(extra)
        entries += config_items(cfg)
        write_manifest(manifest_path, entries)

    for step in range(1, cfg.steps + 1):
        imgs, idx, masks, ts, noise_rng = draw_step_batch(cfg, images_norm, step)
        lr = lr_at(step, cfg.lr, warmup, cfg.steps)
        try:
            report = forward_step(enc, cfg, sched, imgs, masks, ts, noise_rng)
            zero_grad(leaves)
            backward(report.total_tensor, leaves)
            grads = {name: p.grad for name, p in enc.params.items()}
            adamw_step(enc.params, grads, state, lr, cfg.beta1, cfg.beta2,
                       cfg.adam_eps, cfg.weight_decay)
        except NumericsError as err:
            dump_abort(step, idx, str(err))
            raise NumericsError(f"step {step}: {err} (batch indices {idx.tolist()})") from err
        if step % cfg.log_every == 0 or step == cfg.steps:
            rows.append(f"{step},{report.l_mim!r},{report.l_denoise!r},"
                        f"{report.l_disrupt!r},{report.total!r},{lr!r}")
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_train_checkpoint(out / f"checkpoint_{step:06d}.nmim", cfg, enc, state)

    save_train_checkpoint(ckpt_path, cfg, enc, state)
    csv_path.write_text("\n".join(rows) + "\n")
    finish(status="ok")
    return RunArtifacts(out_dir=out, checkpoint_path=ckpt_path, loss_csv_path=csv_path,
                        manifest_path=manifest_path, steps_run=cfg.steps, final_report=report)
