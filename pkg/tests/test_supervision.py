import csv
import dataclasses

import numpy as np
import pytest

from mmnet import matching, ops
from mmnet.autodiff import Tensor
from mmnet.config import TrainConfig
from mmnet.data import Sample
from mmnet.gradcheck import check_gradients
from mmnet.model import MMNet
from mmnet.supervision import (SGD, TrainingError, batch_loss, batches, bilinear_cells, build_gt_map,
                               feature_coords, filter_annotations, gaussian_kernel1d, pair_loss,
                               smooth_and_normalize, train, train_step)

from conftest import SEEDS, toy_config


def _gauss3x3():
    g = np.exp(-np.array([1.0, 0.0, 1.0]) / 2)
    k = np.outer(g, g)
    return k / k.sum()


def _toy_samples(n, size=(64, 64), k=3, seed=0):
    rng = np.random.default_rng(seed)
    h, w = size
    out = []
    for i in range(n):
        src = rng.uniform([2, 2], [w - 2, h - 2], (k, 2))
        tgt = np.clip(src + rng.normal(0, 6, src.shape), 1, min(h, w) - 1)
        out.append(Sample(f"p{i}", "toy", rng.random((h, w, 3)), rng.random((h, w, 3)), src, tgt))
    return out


def _jitter(model, rng, scale=0.1):
    for p in model.params.values():  # move biases off the ReLU kinks
        p.data += scale * rng.standard_normal(p.shape)


class TestGroundTruth:
    def test_kernel(self):
        g = gaussian_kernel1d(1.0)
        np.testing.assert_allclose(g, np.exp([-0.5, 0, -0.5]) / np.exp([-0.5, 0, -0.5]).sum())

    def test_cell_centre_gives_gaussian(self):
        m = build_gt_map(np.array([[3.5 * 8, 2.5 * 8]]), 8, (6, 7))[0]
        ref = np.zeros((6, 7))
        ref[1:4, 2:5] = _gauss3x3()
        np.testing.assert_allclose(m, ref, atol=1e-12)

    def test_corner_is_truncated_and_renormalised(self):
        m = build_gt_map(np.array([[4.0, 4.0]]), 8, (5, 5))[0]
        k = _gauss3x3()[1:, 1:]
        ref = np.zeros((5, 5))
        ref[:2, :2] = k / k.sum()
        np.testing.assert_allclose(m, ref, atol=1e-12)

    def test_bilinear_split(self):
        cells = bilinear_cells(np.array([1.5]), np.array([2.0]), (4, 4))[0]
        assert cells[2, 1] == pytest.approx(0.5) and cells[2, 2] == pytest.approx(0.5)
        assert cells.sum() == pytest.approx(1.0)

    def test_bilinear_quarter(self):
        cells = bilinear_cells(np.array([0.25]), np.array([0.75]), (3, 3))[0]
        np.testing.assert_allclose(cells[:2, :2], [[0.75 * 0.25, 0.25 * 0.25], [0.75 * 0.75, 0.25 * 0.75]])

    def test_edge_coordinates_clamp(self):
        cells = bilinear_cells(np.array([-0.5, 3.4]), np.array([-0.5, 3.2]), (4, 4))
        assert cells[0, 0, 0] == 1.0 and cells[1, 3, 3] == pytest.approx(1.0)

    def test_feature_coords_centre_aligned(self):
        u, v = feature_coords(np.array([[4.0, 12.0]]), 8)
        assert (u[0], v[0]) == (0.0, 1.0)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_unit_mass_and_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform([0, 0], [320, 224], (12, 2))
        for s in (2, 3, 4, 5):
            m = build_gt_map(pts, 2**s, (224 >> s, 320 >> s))
            assert (m >= 0).all()
            np.testing.assert_allclose(m.sum(axis=(1, 2)), 1.0, atol=1e-12)

    def test_wider_sigma_spreads_mass(self):
        pts = np.array([[100.0, 60.0]])
        narrow = build_gt_map(pts, 8, (28, 40), sigma=0.5)
        wide = build_gt_map(pts, 8, (28, 40), sigma=2.0)
        assert wide.max() < narrow.max()

    def test_smoothing_is_separable_conv(self, rng):
        maps = rng.random((2, 5, 6))
        out = smooth_and_normalize(maps)
        pad = np.pad(maps, ((0, 0), (1, 1), (1, 1)))
        k = _gauss3x3()
        ref = sum(k[a, b] * pad[:, a:a + 5, b:b + 6] for a in range(3) for b in range(3))
        np.testing.assert_allclose(out, ref / ref.sum(axis=(1, 2), keepdims=True), atol=1e-12)

    def test_out_of_bounds_raises(self):
        with pytest.raises(ValueError, match="outside"):
            build_gt_map(np.array([[320.0, 10.0]]), 8, (28, 40), (224, 320))

    def test_filter_annotations(self):
        s = np.array([[1.0, 1.0], [-1.0, 5.0], [5.0, 5.0]])
        t = np.array([[2.0, 2.0], [3.0, 3.0], [5.0, 99.0]])
        fs, ft, dropped = filter_annotations(s, t, (10, 10), (10, 10))
        assert dropped == 2
        np.testing.assert_array_equal(fs, [[1.0, 1.0]])
        np.testing.assert_array_equal(ft, [[2.0, 2.0]])


class TestLoss:
    def test_bce_at_matching_distribution(self, rng):
        t = rng.random((3, 8))
        t /= t.sum(axis=1, keepdims=True)
        loss = ops.softmax_bce(Tensor(np.log(t)), t).data
        ref = -(t * np.log(t) + (1 - t) * np.log(1 - t)).sum(axis=1)
        np.testing.assert_allclose(loss, ref, atol=1e-12)

    def test_bce_minimised_at_target(self, rng):
        t = rng.random(6)
        t /= t.sum()
        base = ops.softmax_bce(Tensor(np.log(t)[None]), t[None]).data[0]
        for _ in range(20):
            other = ops.softmax_bce(Tensor((np.log(t) + 0.3 * rng.standard_normal(6))[None]), t[None]).data[0]
            assert other >= base - 1e-12

    @pytest.mark.parametrize("complement", [True, False])
    def test_pair_loss_dense_oracle(self, rng, complement):
        cfg = toy_config(scales=(3, 4, 5), complement_enabled=complement)
        m = MMNet(cfg, dtype=np.float64)
        _jitter(m, rng)
        smp = _toy_samples(1, seed=3)[0]
        feats = m.features(np.stack([smp.source, smp.target]))
        fs, ft = m.select(feats, 0), m.select(feats, 1)
        got = pair_loss(fs, ft, smp.src_kps, smp.tgt_kps, (3, 4, 5), cfg)

        dense = matching.accumulate({s: matching.correlate(fs[s], ft[s]) for s in fs}, complement)
        for s in (3, 4, 5):
            stride, (h, w) = 2**s, m.extent(s)
            s4 = dense[s].data
            total = 0.0
            for p, q in zip(smp.src_kps, smp.tgt_kps):
                i, j = int(p[1] // stride), int(p[0] // stride)
                m_, n_ = int(q[1] // stride), int(q[0] // stride)
                fwd = ops.softmax_bce(Tensor(s4[i, j].reshape(1, -1)), build_gt_map(q[None], stride, (h, w)).reshape(1, -1))
                bwd = ops.softmax_bce(Tensor(s4[:, :, m_, n_].reshape(1, -1)), build_gt_map(p[None], stride, (h, w)).reshape(1, -1))
                total += fwd.data[0] + bwd.data[0]
            assert got[s].item() == pytest.approx(total / len(smp.src_kps), rel=1e-10)

    def test_total_is_weighted_sum(self, rng):
        cfg = toy_config()
        m = MMNet(cfg, dtype=np.float64)
        batch = _toy_samples(2)
        tc = TrainConfig(loss_weights=(1.0, 1.0, 0.5, 2.0), supervised_scales=(4, 5))
        total, per = batch_loss(m, batch, tc)
        assert total.item() == pytest.approx(0.5 * per[4] + 2.0 * per[5], rel=1e-12)

    def test_doubling_alpha_adds_that_scale(self, rng):
        m = MMNet(toy_config(), dtype=np.float64)
        batch = _toy_samples(2)
        a, per = batch_loss(m, batch, TrainConfig(supervised_scales=(4, 5)))
        b, _ = batch_loss(m, batch, TrainConfig(supervised_scales=(4, 5), loss_weights=(1.0, 1.0, 2.0, 1.0)))
        assert b.item() - a.item() == pytest.approx(per[4], rel=1e-10)

    def test_batch_mean(self):
        m = MMNet(toy_config(), dtype=np.float64)
        batch = _toy_samples(3)
        tc = TrainConfig(supervised_scales=(4, 5))
        singles = [batch_loss(m, [s], tc)[0].item() for s in batch]
        assert batch_loss(m, batch, tc)[0].item() == pytest.approx(np.mean(singles), rel=1e-10)

    def test_unsupervised_scale_rejected(self):
        m = MMNet(toy_config(), dtype=np.float64)
        with pytest.raises(ValueError, match="not produced"):
            batch_loss(m, _toy_samples(1), TrainConfig(supervised_scales=(2,)))

    def test_full_loss_gradient(self, rng):
        m = MMNet(toy_config(scales=(4, 5)), dtype=np.float64)
        _jitter(m, rng)
        batch = _toy_samples(1, k=3, seed=5)
        tc = TrainConfig(supervised_scales=(4, 5))
        names = sorted(m.params)

        def f(*ps):
            return batch_loss(MMNet(m.config, dict(zip(names, ps))), batch, tc)[0]

        errs = check_gradients(f, [m.params[n] for n in names], max_entries=3, seed=1)
        assert max(errs) < 1e-4, dict(zip(names, errs))


class TestSGD:
    def test_plain_step(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = SGD({"p": p}, momentum=0.0)
        p.grad = np.array([0.5, 1.0])
        opt.step(0.1)
        np.testing.assert_allclose(p.data, [0.95, -2.1])

    def test_momentum_recurrence(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        opt = SGD({"p": p}, momentum=0.9)
        for _ in range(3):
            p.grad = np.ones(1)
            opt.step(1.0)
        # velocities 1, 1.9, 2.71
        assert p.data[0] == pytest.approx(-(1 + 1.9 + 2.71))

    def test_weight_decay_without_gradient(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD({"p": p}, momentum=0.0, weight_decay=0.5)
        opt.step(0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_zero_grad(self):
        p = Tensor(np.ones(2), requires_grad=True)
        p.grad = np.ones(2)
        SGD({"p": p}).zero_grad()
        assert p.grad is None

    def test_schedule(self):
        tc = TrainConfig(lr=1.0, lr_decay_factor=0.1, decay_interval=10)
        assert [tc.lr_at(i) for i in (0, 9, 10, 25)] == pytest.approx([1.0, 1.0, 0.1, 0.01])


class TestTraining:
    def test_non_finite_loss_aborts_before_update(self):
        m = MMNet(toy_config(), dtype=np.float64)
        m.params["enc.g1.b0.b"].data[:] = np.nan
        before = {k: p.data.copy() for k, p in m.params.items()}
        tc = TrainConfig(supervised_scales=(4, 5))
        with pytest.raises(TrainingError, match="non-finite loss.*p0"):
            train_step(m, _toy_samples(1), SGD(m.params), tc, 7)
        for k, p in m.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_batches_are_epoch_permutations(self):
        stream = batches(10, 5, seed=3)
        for _ in range(3):
            epoch = np.concatenate([next(stream), next(stream)])
            assert sorted(epoch) == list(range(10))

    def test_short_run_is_deterministic_and_logged(self, tmp_path):
        data = _toy_samples(4)
        tc = TrainConfig(lr=1e-3, batch_size=2, max_iters=4, checkpoint_interval=2, supervised_scales=(4, 5))
        runs = []
        for name in ("a", "b"):
            m = MMNet(toy_config(), seed=1)
            hist = train(m, data, tc, tmp_path / name)
            runs.append((hist, (tmp_path / name / "train_log.csv").read_text()))
        assert runs[0][1] == runs[1][1]
        rows = list(csv.reader(runs[0][1].splitlines()))
        assert rows[0] == ["iter", "lr", "loss", "loss_scale2", "loss_scale3", "loss_scale4", "loss_scale5"]
        assert len(rows) == 5 and rows[1][3] == "" and rows[1][5] != ""
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["ckpt_000002", "ckpt_000004", "final",
                                                                    "train_log.csv"]

    def test_loss_decreases_on_one_batch(self):
        data = _toy_samples(2, seed=4)
        m = MMNet(toy_config(), seed=0, dtype=np.float64)
        tc = TrainConfig(lr=2e-3, batch_size=2, max_iters=30, supervised_scales=(4, 5), weight_decay=0.0)
        hist = train(m, data, tc)
        assert np.mean([r.loss for r in hist[-5:]]) < hist[0].loss
