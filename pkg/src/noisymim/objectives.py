"""The three loss terms and their weighted combination.

* masked reconstruction — per-element mean squared error over masked rows
* denoising reconstruction — same form over the noisy-visible rows
* disruption — Shannon entropy of the noisy-visible affinity rows, averaged
  over layers, heads and rows

Both reconstruction losses normalize by (token count · patch dimensionality)
so magnitudes are comparable across patch sizes; the disruption loss averages
rather than sums so its weight is architecture-independent.  Multiplying back
by the respective counts recovers the raw-sum variants.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .corruption import MaskSpec, masked_row_matrix, noisy_row_matrix
from .encoder import AffinityRecord
from .errors import DimensionError, NumericsError
from .tensor import Tensor

ENTROPY_CLAMP = 1e-12


@dataclass
class LossReport:
    """Scalar loss components of one step plus the token counts they used."""

    l_mim: float
    l_denoise: float
    l_disrupt: float
    total: float
    counts: tuple[int, int]
    total_tensor: Tensor | None = None


def _masked_mse(pred: Tensor, target, rows: np.ndarray) -> tuple[Tensor, int]:
    pred = tz.as_tensor(pred)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target_data.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target_data.shape}")
    count = int(rows.sum())
    if count == 0:
        return Tensor(0.0), 0
    diff = pred - target_data
    weighted = diff * diff * rows[..., None]
    return weighted.sum() * (1.0 / (count * pred.shape[-1])), count


def mim_loss(pred, target, mask) -> Tensor:
    """Per-element MSE over masked rows: Σ_masked ‖pred − target‖² / (|masked|·P).

    `mask` may be one MaskSpec or a batch-aligned list; returns 0 when the
    masked set is empty.
    """
    pred = tz.as_tensor(pred)
    loss, _ = _masked_mse(pred, target, masked_row_matrix(mask, pred.shape[-2]))
    return loss


def denoise_loss(pred, target, mask) -> Tensor:
    """Same per-element MSE form, restricted to the noisy-visible rows."""
    pred = tz.as_tensor(pred)
    loss, _ = _masked_mse(pred, target, noisy_row_matrix(mask, pred.shape[-2]))
    return loss


def disruption_loss(affinities: list[AffinityRecord], mask, cls_offset: int = 0,
                    layers=None, columns: str = "all") -> Tensor:
    """Mean Shannon entropy of the noisy-visible affinity rows.

    Sums −p̃·log(p̃ + 1e-12) over columns j (all columns, per the printed
    formula; ``columns="masked_only"`` is an experimental switch restricting
    j to masked columns), then averages over layers, heads, batch and rows.
    Differentiable: gradients reach the query/key projections whenever the
    records were retained on the tape.
    """
    if columns not in ("all", "masked_only"):
        raise ValueError(f"columns must be 'all' or 'masked_only', got {columns!r}")
    if not affinities:
        return Tensor(0.0)
    num_img = affinities[0].per_head.shape[-1] - cls_offset
    rows = noisy_row_matrix(mask, num_img)
    n_rows = int(rows.sum())
    if n_rows == 0:
        return Tensor(0.0)
    selected = affinities if layers is None else [r for r in affinities if r.layer in set(layers)]
    if not selected:
        return Tensor(0.0)

    # [*, 1, L] selector for entropy rows (queries in the noisy-visible set)
    full = np.zeros(rows.shape[:-1] + (num_img + cls_offset,))
    full[..., cls_offset:] = rows
    row_sel = full[..., None, :]

    col_sel = None
    if columns == "masked_only":
        mrows = masked_row_matrix(mask, num_img)
        cfull = np.zeros(mrows.shape[:-1] + (num_img + cls_offset,))
        cfull[..., cls_offset:] = mrows
        col_sel = cfull[..., None, None, :]  # [*, 1, 1, L] over columns

    total = Tensor(0.0)
    for record in selected:
        a = record.per_head
        plogp = a * tz.log(a + ENTROPY_CLAMP)
        if col_sel is not None:
            plogp = plogp * col_sel
        row_entropy = plogp.sum(axis=-1) * -1.0  # [*, heads, L]
        total = total + (row_entropy * row_sel).sum()
    heads = affinities[0].per_head.shape[-3]
    return total * (1.0 / (len(selected) * heads * n_rows))


def total_loss(l_mim: Tensor, l_denoise: Tensor, l_disrupt: Tensor,
               lam_n: float, lam_d: float, counts: tuple[int, int]) -> LossReport:
    """total = l_mim + λ_n·l_denoise + λ_d·l_disrupt, with all three reported.

    Raises NumericsError on any non-finite component; warns when the whole
    objective is degenerate (no masked tokens and both weights zero).
    """
    if lam_n < 0 or lam_d < 0:
        raise ValueError("loss weights must be nonnegative")
    total = l_mim + l_denoise * lam_n + l_disrupt * lam_d
    values = {"l_mim": l_mim.item(), "l_denoise": l_denoise.item(),
              "l_disrupt": l_disrupt.item(), "total": total.item()}
    for name, v in values.items():
        if not np.isfinite(v):
            raise NumericsError(f"non-finite loss component {name} = {v} "
                                f"(counts masked={counts[0]}, noisy={counts[1]})")
    if counts[0] == 0 and lam_n == 0.0 and lam_d == 0.0:
        warnings.warn("degenerate objective: empty masked set with zero denoise/disruption weights",
                      RuntimeWarning, stacklevel=2)
    return LossReport(l_mim=values["l_mim"], l_denoise=values["l_denoise"],
                      l_disrupt=values["l_disrupt"], total=values["total"],
                      counts=counts, total_tensor=total)


def token_counts(mask, num_tokens: int) -> tuple[int, int]:
    """(masked, noisy-visible) token totals across the batch."""
    return (int(masked_row_matrix(mask, num_tokens).sum()),
            int(noisy_row_matrix(mask, num_tokens).sum()))
