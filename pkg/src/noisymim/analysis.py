"""Attention diagnostics and the frozen-feature linear probe.

Per-head "attention distributions" are the batch-and-query-averaged key
distributions of each head; pairwise KL divergence between them (per layer)
measures how differently the heads attend, and the head-averaged attention
row of a chosen query token gives the spatial heatmaps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corruption import STREAM_PROBE, Rng
from .data import Dataset
from .encoder import AffinityRecord, Encoder
from .errors import ContractError, DataError
from .tensor import Tensor

KL_FLOOR = 1e-12


@dataclass
class HeadKLRecord:
    layer: int
    pair: tuple[int, int]
    kl: float
    layer_mean: float


@dataclass
class ProbeResult:
    train_acc: float
    test_acc: float
    feature_layer: int
    classes: int


def _affinity_array(affinity) -> np.ndarray:
    if isinstance(affinity, AffinityRecord):
        affinity = affinity.per_head
    if isinstance(affinity, Tensor):
        affinity = affinity.data
    return np.asarray(affinity)


def head_distribution(affinity, head: int) -> np.ndarray:
    """Mean over query rows (and batch) of one head's post-softmax rows,
    renormalized to sum 1."""
    a = _affinity_array(affinity)
    rows = a[..., head, :, :]
    dist = rows.reshape(-1, rows.shape[-1]).mean(axis=0)
    return dist / dist.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * (np.log(p + KL_FLOOR) - np.log(q + KL_FLOOR))))


def head_kl(affinity, layer: int | None = None) -> list[HeadKLRecord]:
    """KL divergence for every ordered head pair of one layer's affinities."""
    if isinstance(affinity, AffinityRecord) and layer is None:
        layer = affinity.layer
    layer = 0 if layer is None else layer
    a = _affinity_array(affinity)
    heads = a.shape[-3]
    if heads < 2:
        raise ContractError(f"head KL needs at least 2 heads, got {heads}")
    dists = [head_distribution(a, h) for h in range(heads)]
    pairs = [(i, j) for i in range(heads) for j in range(heads) if i != j]
    kls = [_kl(dists[i], dists[j]) for i, j in pairs]
    mean = float(np.mean(kls))
    return [HeadKLRecord(layer=layer, pair=p, kl=k, layer_mean=mean) for p, k in zip(pairs, kls)]


def head_kl_all(records: list[AffinityRecord]) -> list[HeadKLRecord]:
    out: list[HeadKLRecord] = []
    for rec in records:
        out.extend(head_kl(rec))
    return out


def attention_map(affinities: list[AffinityRecord], layer: int, query_idx: int,
                  cls_offset: int = 0) -> np.ndarray:
    """Head-averaged attention row of one query, reshaped to the patch grid
    (raster order matching patchify)."""
    by_layer = {r.layer: r for r in affinities}
    if layer not in by_layer:
        raise ContractError(f"no affinity record for layer {layer}")
    a = _affinity_array(by_layer[layer])
    seq = a.shape[-1]
    if not 0 <= query_idx < seq:
        raise ContractError(f"query index {query_idx} outside [0, {seq})")
    row = a[..., query_idx, :]
    row = row.reshape(-1, seq).mean(axis=0)
    row = row[cls_offset:]
    grid = int(round(np.sqrt(row.shape[0])))
    if grid * grid != row.shape[0]:
        raise ContractError(f"{row.shape[0]} image tokens do not form a square grid")
    return row.reshape(grid, grid)


# -- file emitters -----------------------------------------------------------

def write_pgm(path, grid: np.ndarray, maxval: int = 255) -> None:
    """Portable graymap, P2 text variant, scaled so the peak maps to maxval."""
    g = np.asarray(grid, dtype=np.float64)
    peak = g.max()
    levels = np.zeros(g.shape, dtype=np.int64) if peak <= 0 else np.round(g / peak * maxval).astype(np.int64)
    lines = [f"P2", f"{g.shape[1]} {g.shape[0]}", f"{maxval}"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def write_grid_csv(path, grid: np.ndarray) -> None:
    Path(path).write_text("\n".join(",".join(repr(float(v)) for v in row) for row in np.asarray(grid)) + "\n")


def write_kl_csv(path, records: list[HeadKLRecord]) -> None:
    lines = ["layer,head_i,head_j,kl"]
    lines += [f"{r.layer},{r.pair[0]},{r.pair[1]},{r.kl!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def write_layer_means_csv(path, records: list[HeadKLRecord]) -> None:
    means: dict[int, float] = {}
    for r in records:
        means[r.layer] = r.layer_mean
    lines = ["layer,mean_kl"] + [f"{layer},{means[layer]!r}" for layer in sorted(means)]
    Path(path).write_text("\n".join(lines) + "\n")


def kl_summary_svg(records: list[HeadKLRecord]) -> str:
    """Self-contained SVG scatter: small dots per head pair, one large dot
    per layer at the layer mean."""
    if not records:
        raise ContractError("no KL records to plot")
    width, height, margin = 640, 400, 50
    layers = sorted({r.layer for r in records})
    kl_max = max(max(r.kl for r in records), max(r.layer_mean for r in records), 1e-9)

    def x_of(layer: int) -> float:
        span = max(max(layers), 1)
        return margin + (width - 2 * margin) * layer / span

    def y_of(kl: float) -> float:
        return height - margin - (height - 2 * margin) * kl / kl_max

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
             f'font-size="14">layer</text>',
             f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="14" '
             f'transform="rotate(-90 14 {height / 2:.1f})">KL divergence</text>',
             f'<text x="{margin}" y="{margin - 8}" font-size="11">max {kl_max:.4g}</text>']
    for r in records:
        parts.append(f'<circle class="pair" cx="{x_of(r.layer):.2f}" cy="{y_of(r.kl):.2f}" '
                     f'r="3" fill="steelblue" fill-opacity="0.6"/>')
    for layer in layers:
        mean = next(r.layer_mean for r in records if r.layer == layer)
        parts.append(f'<circle class="layer-mean" cx="{x_of(layer):.2f}" cy="{y_of(mean):.2f}" '
                     f'r="7" fill="crimson"/>')
    parts.append("</svg>")
    return "\n".join(parts)


# -- linear probe -------------------------------------------------------------

def fit_multinomial(train_x: np.ndarray, train_y: np.ndarray, classes: int,
                    epochs: int = 200, lr: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression from zero init; deterministic."""
    n, dim = train_x.shape
    w = np.zeros((dim, classes))
    b = np.zeros(classes)
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), train_y] = 1.0
    for _ in range(epochs):
        logits = train_x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        p = e / e.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (train_x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def _accuracy(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.argmax(x @ w + b, axis=1) == y))


def extract_features(enc: Encoder, images: np.ndarray, layer: int | None = None,
                     chunk: int = 128) -> np.ndarray:
    out = [enc.features_at(images[i:i + chunk], layer) for i in range(0, images.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def linear_probe(checkpoint, dataset: Dataset, feature_layer: int | None = None,
                 seed: int = 0, train_frac: float = 0.8) -> ProbeResult:
    """Multinomial logistic probe on frozen mean-pooled features.

    `checkpoint` is an Encoder or a checkpoint path.  Features are drawn
    from an uncorrupted forward pass, standardized with train-split
    statistics; the split permutation is the only use of the seed.
    """
    if not isinstance(checkpoint, Encoder):
        from .trainer import load_encoder

        checkpoint, _ = load_encoder(checkpoint)
    enc = checkpoint
    layer = enc.config.depth if feature_layer is None else feature_layer
    feats = extract_features(enc, dataset.normalized(), layer)
    labels = dataset.labels
    classes = dataset.num_classes
    perm = Rng(seed, STREAM_PROBE).permutation(len(dataset))
    n_train = int(round(train_frac * len(dataset)))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    train_y = labels[train_idx]
    if len(np.unique(train_y)) != classes:
        missing = sorted(set(range(classes)) - set(np.unique(train_y).tolist()))
        raise DataError(f"classes {missing} absent from the train split")
    mu = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    fx = (feats - mu) / sd
    w, b = fit_multinomial(fx[train_idx], train_y, classes)
    return ProbeResult(train_acc=_accuracy(fx[train_idx], train_y, w, b),
                       test_acc=_accuracy(fx[test_idx], labels[test_idx], w, b),
                       feature_layer=layer, classes=classes)
