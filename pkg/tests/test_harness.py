import math

import numpy as np
import pytest
import torch

from sharecmp.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from sharecmp.config import TrainConfig
from sharecmp.data import DatasetIndex, collate, load_sample
from sharecmp.errors import CheckpointError, DatasetError, TrainingError
from sharecmp.harness import evaluate, make_optimizer, poly_lr, train, train_step, warmup_steps
from sharecmp.metrics import ConfusionMatrix
from sharecmp.model import ShareCMP
from sharecmp.params import count, count_params


def brute_force_miou(pairs, num_classes):
    """Per-class IoU from explicit pixel sets pooled over all images."""
    inter = [0] * num_classes
    union = [0] * num_classes
    for pred, gt in pairs:
        valid = {(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1]) if gt[i, j] != 255}
        for c in range(num_classes):
            p = {ij for ij in valid if pred[ij] == c}
            g = {ij for ij in valid if gt[ij] == c}
            inter[c] += len(p & g)
            union[c] += len(p | g)
    ious = [i / u for i, u in zip(inter, union) if u > 0]
    return sum(ious) / len(ious)


class TestPolyLR:
    cfg = TrainConfig(lr=6e-5, epochs=50, warmup_epochs=5)

    def test_first_step(self):
        assert poly_lr(0, 1000, self.cfg) == pytest.approx(6e-11, rel=1e-12)

    def test_final_step(self):
        assert poly_lr(1000, 1000, self.cfg) == 0.0

    def test_midpoint(self):
        w = warmup_steps(1000, self.cfg)
        assert w == 100
        assert poly_lr(w + (1000 - w) // 2, 1000, self.cfg) == pytest.approx(3e-5, rel=1e-12)

    def test_continuity_at_boundary(self):
        w = warmup_steps(1000, self.cfg)
        assert poly_lr(w, 1000, self.cfg) == 6e-5
        assert poly_lr(w - 1e-9, 1000, self.cfg) == pytest.approx(6e-5, rel=1e-9)
        lrs = [poly_lr(s, 1000, self.cfg) for s in range(1001)]
        assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) < 1e-6

    def test_constant_warmup(self):
        cfg = TrainConfig(warmup_mode="constant")
        assert poly_lr(3, 1000, cfg) == pytest.approx(6e-11)


def one_batch(synth_root, n=2):
    index = DatasetIndex.load(synth_root, "train")
    return collate([load_sample(index, i) for i in index.ids[:n]])


class TestTrainStep:
    def test_zero_lr_keeps_parameters(self, tiny_cfg, synth_root):
        model = ShareCMP(tiny_cfg.model)
        before = {k: v.clone() for k, v in model.state_dict().items() if "running" not in k and "num_batches" not in k}
        opt = make_optimizer(model, tiny_cfg.train)
        train_step(model, one_batch(synth_root), opt, 0.0)
        after = model.state_dict()
        assert all(torch.equal(v, after[k]) for k, v in before.items())
        assert opt.state  # moments were updated

    def test_nonfinite_loss(self, tiny_cfg, synth_root):
        model = ShareCMP(tiny_cfg.model)
        with torch.no_grad():
            model.decoder.classifier.bias.fill_(float("nan"))
        with pytest.raises(TrainingError, match="seg_loss"):
            train_step(model, one_batch(synth_root), make_optimizer(model, tiny_cfg.train), 1e-3)

    def test_single_batch_overfit(self, tiny_cfg, synth_root):
        torch.manual_seed(0)
        model = ShareCMP(tiny_cfg.model)
        batch = one_batch(synth_root)
        opt = make_optimizer(model, tiny_cfg.train)
        losses = [train_step(model, batch, opt, 2e-3)["loss"] for _ in range(200)]
        assert losses[-1] <= losses[0] / 10
        # trend oracle: every 20-step window mean is below the first window's
        windows = [np.mean(losses[k : k + 20]) for k in range(0, 200, 20)]
        assert all(w < windows[0] for w in windows[1:])


class TestMetrics:
    def test_perfect(self):
        gt = np.random.default_rng(0).integers(0, 3, (8, 8))
        assert ConfusionMatrix(3).update(gt, gt).miou() == 1.0

    def test_disjoint(self):
        gt = np.random.default_rng(0).integers(0, 3, (8, 8))
        assert ConfusionMatrix(3).update((gt + 1) % 3, gt).miou() == 0.0

    def test_hand_case(self):
        gt = np.array([[0] * 4] * 2 + [[1] * 4] * 2)
        pred = gt.copy()
        pred[0, :2] = 1  # 2 FN for class 0, 2 FP for class 1
        pred[3, :2] = 0  # 2 FP for class 0, 2 FN for class 1
        cm = ConfusionMatrix(2).update(pred, gt)
        assert cm.counts.tolist() == [[6, 2], [2, 6]]
        assert cm.miou() == pytest.approx(0.6, abs=1e-15)

    def test_ignore_and_absent(self):
        gt = np.array([[0, 0], [255, 1]])
        pred = np.array([[0, 0], [2, 1]])
        cm = ConfusionMatrix(4).update(pred, gt)
        assert cm.total == 3
        assert np.isnan(cm.iou()[2]) and np.isnan(cm.iou()[3])
        assert cm.miou() == 1.0

    def test_against_brute_force(self):
        rng = np.random.default_rng(7)
        for case in range(20):
            k = int(rng.integers(2, 6))
            pairs = []
            cm = ConfusionMatrix(k)
            for _ in range(int(rng.integers(1, 4))):
                gt = rng.integers(0, k, (16, 16))
                gt[rng.random((16, 16)) < 0.1] = 255
                pred = np.where(rng.random((16, 16)) < 0.6, gt, rng.integers(0, k, (16, 16)))
                pred[pred == 255] = 0
                pairs.append((pred, gt))
                cm.update(pred, gt)
            assert cm.miou() == pytest.approx(brute_force_miou(pairs, k), abs=1e-12), case


class TestTrainAndEvaluate:
    def test_deterministic_runs(self, tiny_cfg, synth_root, tmp_path):
        tiny_cfg.data.root = str(synth_root)
        tiny_cfg.train.batch_size = 4
        a = train(tiny_cfg, tmp_path / "a", max_steps=4)
        b = train(tiny_cfg, tmp_path / "b", max_steps=4)
        la = [h["loss"] for h in a.history if "loss" in h]
        lb = [h["loss"] for h in b.history if "loss" in h]
        assert len(la) == 4
        assert max(abs(x - y) for x, y in zip(la, lb)) <= 1e-6
        assert a.eval.confusion.to_list() == b.eval.confusion.to_list()
        assert (tmp_path / "a" / "metrics.jsonl").read_text().count("\n") == 5

    def test_checkpoint_round_trip(self, tiny_cfg, synth_root, tmp_path):
        index = DatasetIndex.load(synth_root, "val")
        model = ShareCMP(tiny_cfg.model)
        path = save_checkpoint(tmp_path / "m.pt", model, {"note": 1})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": 1}
        assert evaluate(model, index).confusion.to_list() == evaluate(loaded, index).confusion.to_list()
        cfg, tensors, _ = read_checkpoint(path)
        assert "cpaahead.stage3.conv1.weight" in tensors and "pga.conv0.weight" in tensors

    def test_bad_checkpoints(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing.pt")
        (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.pt")

    def test_empty_split(self, tiny_cfg, synth_root):
        index = DatasetIndex.load(synth_root, "val")
        index.ids = []
        with pytest.raises(DatasetError):
            evaluate(ShareCMP(tiny_cfg.model), index)


class TestParams:
    def test_bias_free_linear(self):
        assert count(torch.nn.Linear(7, 5, bias=False)) == 35

    def test_b2_ratios(self):
        r = count_params()
        assert 0.61 <= r.ratios["encoder_shared_over_dual"] <= 0.71
        assert 0.26 <= r.ratios["total_reduction"] <= 0.36
        assert r.total == r.modules["pga"] + r.modules["encoder"] + r.modules["decoder"]
        assert r.total_training == r.total + r.modules["cpaahead"]
        assert math.isclose(r.ratios["total_reduction"], 1 - r.total / r.baseline["total"])
