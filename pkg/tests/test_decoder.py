import math

import pytest
import torch

from helpers import assert_gradients_match, finite_difference_check, randomize_
from sharecmp.config import DecoderConfig
from sharecmp.decoder import MLPDecoder, predict, seg_loss
from sharecmp.errors import InvalidInputError
from sharecmp.model import ShareCMP

DIMS = (16, 32, 64, 128)


def fake_feats(size=64, dims=DIMS, dtype=torch.float32):
    return [torch.randn(2, d, size // s, size // s, dtype=dtype) for d, s in zip(dims, (4, 8, 16, 32))]


def test_logits_shape():
    dec = MLPDecoder(DIMS, DecoderConfig(num_classes=5, embed_dim=64)).eval()
    assert dec(fake_feats()).shape == (2, 5, 16, 16)
    assert dec(fake_feats(), out_size=(64, 64)).shape == (2, 5, 64, 64)


def test_missing_stage():
    dec = MLPDecoder(DIMS, DecoderConfig(num_classes=5, embed_dim=8))
    with pytest.raises(InvalidInputError):
        dec(fake_feats()[:3])


def test_zero_classifier_ties_to_lowest_index():
    dec = MLPDecoder(DIMS, DecoderConfig(num_classes=4, embed_dim=8)).eval()
    with torch.no_grad():
        dec.classifier.weight.zero_()
        dec.classifier.bias.zero_()
    assert not predict(dec(fake_feats(), (64, 64))).any()


def test_class_permutation_equivariance():
    dec = MLPDecoder(DIMS, DecoderConfig(num_classes=4, embed_dim=8)).eval()
    feats = fake_feats()
    base = dec(feats)
    perm = torch.tensor([3, 1, 0, 2])
    with torch.no_grad():
        dec.classifier.weight.copy_(dec.classifier.weight[perm])
        dec.classifier.bias.copy_(dec.classifier.bias[perm])
    torch.testing.assert_close(dec(feats), base[:, perm])


def test_seg_loss_uniform():
    logits = torch.zeros(2, 4, 8, 8, dtype=torch.float64)
    mask = torch.randint(0, 4, (2, 8, 8))
    assert seg_loss(logits, mask).item() == pytest.approx(math.log(4), abs=1e-12)


def test_seg_loss_saturated():
    mask = torch.randint(0, 3, (1, 8, 8))
    logits = torch.nn.functional.one_hot(mask, 3).permute(0, 3, 1, 2).float() * 50
    assert seg_loss(logits, mask).item() < 1e-3


def test_seg_loss_hand_case():
    logits = torch.tensor([1.0, 0.0], dtype=torch.float64).view(1, 2, 1, 1)
    expected = -math.log(math.e / (math.e + 1))
    assert seg_loss(logits, torch.zeros(1, 1, 1, dtype=torch.long)).item() == pytest.approx(expected, abs=1e-12)


def test_seg_loss_ignores_255():
    logits = torch.randn(1, 3, 4, 4)
    mask = torch.randint(0, 3, (1, 4, 4))
    mask[0, :2] = 255
    expected = torch.nn.functional.cross_entropy(logits[..., 2:, :], mask[:, 2:])
    torch.testing.assert_close(seg_loss(logits, mask), expected)


def test_seg_loss_all_ignored():
    logits = torch.randn(1, 3, 4, 4, requires_grad=True)
    with pytest.warns(RuntimeWarning):
        loss = seg_loss(logits, torch.full((1, 4, 4), 255))
    assert loss.item() == 0.0
    loss.backward()


def test_gradients():
    dims = (4, 4, 4, 4)
    dec = MLPDecoder(dims, DecoderConfig(num_classes=3, embed_dim=4, dropout=0.0)).double().eval()
    randomize_(dec, torch.Generator().manual_seed(0))
    g = torch.Generator().manual_seed(1)
    feats = [torch.randn(1, 4, 8 // s, 8 // s, generator=g, dtype=torch.float64) for s in (1, 2, 4, 8)]
    mask = torch.randint(0, 3, (1, 8, 8), generator=g)
    errors = finite_difference_check(lambda: seg_loss(dec(feats, (8, 8)), mask), dict(dec.named_parameters()))
    assert_gradients_match(errors)


def test_total_is_seg_plus_cpa(tiny_cfg):
    model = ShareCMP(tiny_cfg.model).train()
    out = model(torch.rand(2, 3, 64, 64), torch.rand(2, 12, 64, 64))
    batch = {"mask": torch.randint(0, 3, (2, 64, 64)), "aolp": torch.rand(2, 64, 64), "dolp": torch.rand(2, 64, 64)}
    losses = model.losses(out, batch)
    assert losses["cpa_loss"].item() > 0
    assert torch.equal(losses["loss"], losses["seg_loss"] + losses["cpa_loss"])
