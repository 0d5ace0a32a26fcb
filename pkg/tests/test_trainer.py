from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmretrieval.errors import CorruptSnapshot, DivergedLoss, EmptyDataset, NonFiniteInput, VersionMismatch
from mmretrieval.trainer import (
    BatchPair,
    LinearHead,
    TrainConfig,
    clip_loss,
    clip_loss_grad,
    fit,
    load_heads,
    normalize_rows,
    recall_at_k,
    save_heads,
    two_view_clusters,
)
from oracles import naive_clip_loss, numeric_grad


def batch(n: int, d: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return normalize_rows(rng.standard_normal((n, d))), normalize_rows(rng.standard_normal((n, d)))


class TestLoss:
    def test_single_pair_is_zero(self):
        v, t = batch(1, 8, 0)
        assert clip_loss(v, t) == 0.0

    def test_two_orthogonal_pairs(self):
        e = np.eye(2)
        assert abs(clip_loss(e, e, tau=1.0) - math.log(1 + math.exp(-1))) <= 1e-9

    @pytest.mark.parametrize("n", [2, 5, 9])
    def test_identical_embeddings_give_ln_n(self, n):
        x = np.tile(normalize_rows(np.ones((1, 4))), (n, 1))
        assert clip_loss(x, x) == pytest.approx(math.log(n), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_naive(self, seed):
        v, t = batch(6, 10, seed)
        assert clip_loss(v, t, 0.2) == pytest.approx(naive_clip_loss(v, t, 0.2), abs=1e-12)

    def test_stable_at_small_tau(self):
        v, t = batch(4, 4, 1)
        assert math.isfinite(clip_loss(v, t, tau=1e-4))

    def test_non_finite(self):
        v, t = batch(2, 3, 0)
        v[0, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            clip_loss(v, t)
        with pytest.raises(NonFiniteInput):
            clip_loss_grad(v, t)

    @settings(max_examples=50)
    @given(st.integers(2, 12), st.integers(1, 16), st.integers(0, 10_000), st.floats(0.05, 2))
    def test_positive_for_random_batches(self, n, d, seed, tau):
        v, t = batch(n, d, seed)
        assert clip_loss(v, t, tau) > 0

    @settings(max_examples=50)
    @given(st.integers(1, 12), st.integers(0, 10_000))
    def test_row_permutation_invariant(self, n, seed):
        v, t = batch(n, 6, seed)
        perm = np.random.default_rng(seed + 1).permutation(n)
        assert clip_loss(v[perm], t[perm]) == pytest.approx(clip_loss(v, t), rel=1e-12, abs=1e-12)

    def test_batch_pair_invariants(self):
        v, t = batch(3, 4, 0)
        assert BatchPair(v, t).N == 3
        with pytest.raises(ValueError):
            BatchPair(v, t[:2])
        with pytest.raises(ValueError):
            BatchPair(v * 2, t)


class TestGradient:
    def test_single_pair_zero(self):
        v, t = batch(1, 5, 0)
        gv, gt = clip_loss_grad(v, t)
        assert not gv.any() and not gt.any()

    def test_symmetric_batch(self):
        v, _ = batch(4, 6, 2)
        gv, gt = clip_loss_grad(v, v.copy())
        np.testing.assert_allclose(gv, gt, atol=1e-15)

    @pytest.mark.parametrize("n", [2, 4, 8])
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, n, seed):
        v, t = batch(n, 16, seed)
        tau = 0.5
        gv, gt = clip_loss_grad(v, t, tau)
        nv = numeric_grad(lambda x: clip_loss(x, t, tau), v.copy())
        nt = numeric_grad(lambda x: clip_loss(v, x, tau), t.copy())
        for analytic, numeric in ((gv, nv), (gt, nt)):
            rel = np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12)
            assert rel < 1e-4

    def test_descent_step(self):
        v, t = batch(8, 16, 3)
        gv, gt = clip_loss_grad(v, t)
        assert clip_loss(v - 1e-3 * gv, t - 1e-3 * gt) < clip_loss(v, t)


class TestRecall:
    def test_aligned(self):
        e = np.eye(6)
        assert recall_at_k(e, e, 1) == 1.0

    def test_k_covers_corpus(self):
        v, t = batch(7, 4, 0)
        assert recall_at_k(v, t, 7) == 1.0

    def test_adversarial_pairing(self):
        # two far clusters; every text sits in the cluster opposite its image
        img = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
        txt = img[::-1].copy()
        assert recall_at_k(img, txt, 1) == 0.0

    def test_ties_rank_lower_index_first(self):
        same = np.tile([[1.0, 0.0]], (4, 1))
        # text i ranks image i at position i+1
        assert recall_at_k(same, same, 2) == 0.5

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            recall_at_k(np.zeros((0, 3)), np.zeros((0, 3)))


class TestHead:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 4))
        head = LinearHead(rng.standard_normal((4, 3)))
        target = rng.standard_normal((5, 3))

        def f(w):
            return float(np.sum(LinearHead(w)(x) * target))

        np.testing.assert_allclose(head.backward(x, target), numeric_grad(f, head.weight.copy()), atol=1e-7)

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(1)
        a, b = LinearHead(rng.standard_normal((4, 3))), LinearHead(rng.standard_normal((4, 3)))
        save_heads(tmp_path / "h.bin", a, b)
        la, lb = load_heads(tmp_path / "h.bin")
        np.testing.assert_array_equal(la.weight, a.weight.astype(np.float32))
        np.testing.assert_array_equal(lb.weight, b.weight.astype(np.float32))

    def test_load_errors(self, tmp_path):
        save_heads(tmp_path / "h.bin", LinearHead(np.eye(2)), LinearHead(np.eye(2)))
        raw = (tmp_path / "h.bin").read_bytes()
        (tmp_path / "cut.bin").write_bytes(raw[:-3])
        with pytest.raises(CorruptSnapshot):
            load_heads(tmp_path / "cut.bin")
        (tmp_path / "v2.bin").write_bytes(b"VLHEAD02" + raw[8:])
        with pytest.raises(VersionMismatch):
            load_heads(tmp_path / "v2.bin")


class TestFit:
    def test_learns_two_view_clusters(self):
        data = two_view_clusters(seed=0)
        img_head, txt_head, hist = fit(data.train_images, data.train_texts, data.val_images, data.val_texts)
        assert hist.baseline_recall <= 0.15
        assert hist.best_epoch > 0
        assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)
        assert hist.recall_at_10[hist.best_epoch] >= 0.9
        assert recall_at_k(img_head(data.val_images), txt_head(data.val_texts), 10) >= 0.9

    def test_zero_learning_rate_is_flat_and_stops(self):
        data = two_view_clusters(seed=1, train_per_cluster=20)
        _, _, hist = fit(
            data.train_images, data.train_texts, data.val_images, data.val_texts,
            TrainConfig(learning_rate=0.0, patience=3),
        )
        assert hist.stopped_early and len(hist.val_loss) == 4
        assert len(set(hist.val_loss)) == 1 and hist.val_loss[0] == hist.baseline_loss

    def test_shared_item_rejected(self):
        data = two_view_clusters(seed=2, train_per_cluster=5)
        vi = np.vstack([data.val_images, data.train_images[:1]])
        vt = np.vstack([data.val_texts, data.train_texts[:1]])
        with pytest.raises(ValueError):
            fit(data.train_images, data.train_texts, vi, vt)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            fit(np.zeros((0, 4)), np.zeros((0, 4)), np.eye(4), np.eye(4))

    def test_divergence(self):
        data = two_view_clusters(seed=3, train_per_cluster=10)
        with pytest.raises(DivergedLoss):
            fit(data.train_images, data.train_texts, data.val_images, data.val_texts, TrainConfig(learning_rate=1e308))

    def test_deterministic_history(self):
        data = two_view_clusters(seed=4, train_per_cluster=20)
        runs = [fit(data.train_images, data.train_texts, data.val_images, data.val_texts)[2] for _ in range(2)]
        assert runs[0].to_csv() == runs[1].to_csv()
        assert runs[0].to_csv().splitlines()[0] == "epoch,val_loss,recall_at_10"

    def test_config_validation(self):
        for bad in [dict(tau=0), dict(patience=0), dict(epochs=0), dict(learning_rate=-1)]:
            with pytest.raises(ValueError):
                TrainConfig(**bad)
