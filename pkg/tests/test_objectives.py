import math
import warnings

import numpy as np
import numpy.testing as npt
import pytest

from noisymim.corruption import MaskSpec, Rng, generate_mask
from noisymim.encoder import AffinityRecord, Encoder, EncoderConfig, patchify
from noisymim.errors import NumericsError
from noisymim.objectives import (denoise_loss, disruption_loss, mim_loss, token_counts,
                                 total_loss)
from noisymim.optim import OptimizerState, adamw_step
from noisymim.tensor import Tensor, backward, zero_grad


def spec_from(length, masked):
    mask = np.zeros(length)
    mask[masked] = 1.0
    rest = np.setdiff1d(np.arange(length), masked)
    return MaskSpec(mask=mask, gamma=len(masked) / length,
                    masked_idx=np.asarray(masked, dtype=np.int64),
                    noisy_visible_idx=rest.astype(np.int64))


def brute_force_masked_mse(pred, target, row_sets):
    """Triple loop over (sample, token, element), the independent oracle."""
    pred = np.atleast_3d(pred) if pred.ndim == 2 else pred
    target = np.atleast_3d(target) if target.ndim == 2 else target
    if pred.ndim == 2:
        pred, target, row_sets = pred[None], target[None], [row_sets]
    total, count = 0.0, 0
    for s in range(pred.shape[0]):
        for token in row_sets[s]:
            count += 1
            for e in range(pred.shape[2]):
                d = pred[s, token, e] - target[s, token, e]
                total += d * d
    return total / (count * pred.shape[2]) if count else 0.0


class TestMimLoss:
    def test_perfect_prediction(self):
        spec = spec_from(4, [0, 1])
        x = Rng(0).normal((4, 6))
        assert mim_loss(Tensor(x), x, spec).item() == 0.0

    def test_single_token_unit_error(self):
        spec = spec_from(4, [2])
        pred = np.zeros((4, 2))
        target = np.zeros((4, 2))
        pred[2] = [1.0, 1.0]
        assert mim_loss(Tensor(pred), target, spec).item() == 1.0

    def test_empty_masked_set_is_zero(self):
        spec = spec_from(4, [])
        assert mim_loss(Tensor(np.ones((4, 3))), np.zeros((4, 3)), spec).item() == 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = Rng(seed, 21)
        spec = generate_mask(rng, 8, 0.5)
        pred = rng.normal((8, 5))
        target = rng.normal((8, 5))
        got = mim_loss(Tensor(pred), target, spec).item()
        want = brute_force_masked_mse(pred[None], target[None], [spec.masked_idx])
        assert abs(got - want) < 1e-12

    def test_batched_matches_brute_force(self):
        rng = Rng(77, 3)
        specs = [generate_mask(rng, 8, 0.5) for _ in range(3)]
        pred = rng.normal((3, 8, 5))
        target = rng.normal((3, 8, 5))
        got = mim_loss(Tensor(pred), target, specs).item()
        want = brute_force_masked_mse(pred, target, [s.masked_idx for s in specs])
        assert abs(got - want) < 1e-12


class TestDenoiseLoss:
    def test_empty_noisy_set(self):
        spec = spec_from(4, [0, 1, 2, 3])
        assert denoise_loss(Tensor(np.ones((4, 3))), np.zeros((4, 3)), spec).item() == 0.0

    def test_restriction_to_noisy_rows(self):
        spec = spec_from(4, [0, 1])  # noisy set = {2, 3}
        target = Rng(1).normal((4, 3))
        pred = target.copy()
        pred[[0, 1]] = 99.0  # garbage outside the noisy set
        assert denoise_loss(Tensor(pred), target, spec).item() == 0.0

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_brute_force(self, seed):
        rng = Rng(seed, 22)
        spec = generate_mask(rng, 8, 0.25)
        pred = rng.normal((8, 5))
        target = rng.normal((8, 5))
        got = denoise_loss(Tensor(pred), target, spec).item()
        want = brute_force_masked_mse(pred[None], target[None], [spec.noisy_visible_idx])
        assert abs(got - want) < 1e-12


def record_from(a, layer=0):
    return AffinityRecord(layer=layer, per_head=Tensor(a), retained_for_grad=False)


class TestDisruptionLoss:
    def test_one_hot_rows_zero_entropy(self):
        a = np.zeros((1, 2, 4, 4))
        a[..., 0] = 1.0
        spec = spec_from(4, [])
        loss = disruption_loss([record_from(a)], [spec]).item()
        assert abs(loss) < 1e-11

    def test_uniform_rows_log_l(self):
        a = np.full((2, 8, 8), 1.0 / 8.0)
        spec = spec_from(8, [0, 1])  # 6 noisy rows
        loss = disruption_loss([record_from(a)], spec).item()
        assert abs(loss - math.log(8)) < 1e-9

    def test_half_half_row(self):
        a = np.full((1, 2, 2), 0.5)
        spec = spec_from(2, [0])
        loss = disruption_loss([record_from(a)], spec).item()
        assert abs(loss - math.log(2)) < 1e-10

    def test_entropy_bounds(self):
        rng = Rng(5, 9)
        for _ in range(20):
            logits = rng.normal((1, 3, 8, 8)) * 3
            e = np.exp(logits)
            a = e / e.sum(axis=-1, keepdims=True)
            spec = generate_mask(Rng(1), 8, 0.5)
            loss = disruption_loss([record_from(a)], spec).item()
            assert 0.0 <= loss <= math.log(8) + 1e-9

    def test_layer_subset_switch(self):
        rng = Rng(6, 9)
        recs = []
        for layer in range(3):
            e = np.exp(rng.normal((2, 4, 4)))
            recs.append(record_from(e / e.sum(axis=-1, keepdims=True), layer=layer))
        spec = spec_from(4, [0])
        all_layers = disruption_loss(recs, spec).item()
        only_1 = disruption_loss(recs, spec, layers=(1,)).item()
        manual = disruption_loss([recs[1]], spec).item()
        assert abs(only_1 - manual) < 1e-12
        mean_manual = np.mean([disruption_loss([r], spec).item() for r in recs])
        assert abs(all_layers - mean_manual) < 1e-12

    def test_masked_only_columns_switch(self):
        rng = Rng(7, 9)
        e = np.exp(rng.normal((2, 4, 4)))
        a = e / e.sum(axis=-1, keepdims=True)
        spec = spec_from(4, [1, 3])
        got = disruption_loss([record_from(a)], spec, columns="masked_only").item()
        # brute force: only columns {1, 3} of noisy rows {0, 2}
        want = 0.0
        for h in range(2):
            for i in (0, 2):
                for j in (1, 3):
                    p = a[h, i, j]
                    want -= p * math.log(p + 1e-12)
        want /= 2 * 2  # heads * noisy rows
        assert abs(got - want) < 1e-12

    def test_gradients_reach_query_key_projections(self):
        cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
                            noise_block=1, strategy="hybrid", mask_ratio=0.5)
        enc = Encoder(cfg, Rng(8))
        emb = enc.embed_patches(patchify(Rng(9).normal((2, 3, 8, 8)), 4))
        _, records = enc.forward(emb, record_grad=True)
        spec = [generate_mask(Rng(2), 4, 0.5) for _ in range(2)]
        zero_grad(enc.leaves())
        backward(disruption_loss(records, spec), enc.leaves())
        assert np.abs(enc.params["block0.attn.wq"].grad).sum() > 0
        assert np.abs(enc.params["block1.attn.wk"].grad).sum() > 0


class TestTotalLoss:
    def test_reduces_to_mim(self):
        rep = total_loss(Tensor(0.7), Tensor(0.3), Tensor(0.1), 0.0, 0.0, (4, 0))
        assert rep.total == 0.7

    def test_arithmetic(self):
        rep = total_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0), 1.0, 0.1, (4, 4))
        assert abs(rep.total - 2.1) < 1e-15

    def test_component_additivity_exact(self):
        rng = Rng(10, 4)
        for _ in range(20):
            m, n, d = (abs(float(v)) for v in rng.normal(3))
            lam_n, lam_d = abs(float(rng.normal())), abs(float(rng.normal()))
            rep = total_loss(Tensor(m), Tensor(n), Tensor(d), lam_n, lam_d, (1, 1))
            assert rep.total == rep.l_mim + lam_n * rep.l_denoise + lam_d * rep.l_disrupt

    def test_changing_lambda_keeps_l_mim(self):
        m, n, d = Tensor(0.5), Tensor(0.25), Tensor(2.0)
        a = total_loss(m, n, d, 1.0, 0.0, (2, 2))
        b = total_loss(m, n, d, 1.0, 0.7, (2, 2))
        assert a.l_mim == b.l_mim and a.l_denoise == b.l_denoise

    def test_nan_aborts(self):
        with pytest.raises(NumericsError, match="l_denoise"):
            total_loss(Tensor(0.1), Tensor(float("nan")), Tensor(0.0), 1.0, 0.1, (1, 1))

    def test_degenerate_objective_warns(self):
        with pytest.warns(RuntimeWarning, match="degenerate"):
            total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), 0.0, 0.0, (0, 0))

    def test_counts_helper(self):
        specs = [spec_from(8, [0, 1, 2]), spec_from(8, [5])]
        assert token_counts(specs, 8) == (4, 12)


class TestEntropyMinimization:
    def test_disruption_only_training_decreases_entropy(self):
        # frozen values path: only Q/K projections trainable
        cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
                            noise_block=1, strategy="hybrid", mask_ratio=0.5,
                            disruption_weight=1.0)
        enc = Encoder(cfg, Rng(11))
        images = Rng(12).normal((4, 3, 8, 8))
        specs = [generate_mask(Rng(13, s), 4, 0.5) for s in range(4)]
        trainable = {n: p for n, p in enc.params.items()
                     if ".attn.wq" in n or ".attn.wk" in n}
        state = OptimizerState.for_params(trainable)

        def noisy_row_entropy():
            emb = enc.embed_patches(patchify(images, 4))
            emb = enc.mask_embedding(emb, specs)
            _, records = enc.forward(emb, record_grad=True)
            return disruption_loss(records, specs), records

        entropies = []
        for _ in range(50):
            loss, _ = noisy_row_entropy()
            entropies.append(loss.item())
            zero_grad(list(trainable.values()))
            backward(loss, list(trainable.values()))
            adamw_step(trainable, {n: p.grad for n, p in trainable.items()}, state,
                       lr=0.01, weight_decay=0.0)
        final, _ = noisy_row_entropy()
        entropies.append(final.item())
        assert entropies[-1] < entropies[0]
        # the trend is a strict decrease overall, not just endpoint luck
        assert entropies[-1] < min(entropies[:5])
