import math

import numpy as np
import pytest
import torch

from sacropipe import nets
from sacropipe.errors import ConfigError, ShapeError, UpstreamMissingError

PROGRESSIVE_SIZES = [(106, 158), (208, 314), (312, 472), (416, 628)]
SMALL_CLF = nets.ClassifierConfig(stages=[(8, 1), (16, 1)], stem_channels=8)


def small_unet():
    return nets.UNet(nets.UNetConfig(input_size=(32, 32), channels=[4, 8, 16]))


def central_diff(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x).item()
        flat[i] = old - h
        down = f(x).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(f, x):
    x = x.clone().requires_grad_(True)
    f(x).backward()
    fd = central_diff(f, x.detach().clone())
    return ((x.grad - fd).norm() / fd.norm().clamp_min(1e-12)).item()


class TestUNet:
    def test_shape(self):
        out = small_unet().eval()(torch.randn(2, 1, 32, 32))
        assert out.shape == (2, 3, 32, 32)

    def test_zero_head(self):
        net = small_unet().eval()
        torch.nn.init.zeros_(net.head.weight)
        torch.nn.init.zeros_(net.head.bias)
        assert (net(torch.zeros(1, 1, 32, 32)) == 0).all()

    def test_argmax_labels(self):
        out = small_unet().eval()(torch.randn(1, 1, 32, 32))
        assert set(out.argmax(1).unique().tolist()) <= {0, 1, 2}

    def test_deterministic_eval(self):
        net, x = small_unet().eval(), torch.randn(1, 1, 32, 32)
        assert torch.equal(net(x), net(x))

    def test_wrong_size(self):
        with pytest.raises(ShapeError):
            small_unet()(torch.zeros(1, 1, 64, 64))

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            nets.UNetConfig(channels=[4, 8])
        with pytest.raises(ConfigError):
            nets.UNetConfig(input_size=(30, 32), channels=[4, 8, 16])


class TestClassifier:
    def test_progressive_sizes(self):
        net = nets.Classifier(SMALL_CLF).eval()
        for h, w in PROGRESSIVE_SIZES:
            assert net(torch.randn(1, 1, h, w)).shape == (1, 2)

    def test_default_parameter_budget(self):
        n = sum(p.numel() for p in nets.Classifier().parameters())
        assert 1_000_000 <= n <= 2_000_000

    def test_softmax_and_duplicates(self):
        net = nets.Classifier(SMALL_CLF).eval()
        x = torch.randn(1, 1, 64, 96).repeat(3, 1, 1, 1)
        out = net(x)
        assert torch.allclose(out.softmax(1).sum(1), torch.ones(3), atol=1e-6)
        assert torch.equal(out[0], out[1]) and torch.equal(out[0], out[2])

    def test_too_small(self):
        with pytest.raises(ShapeError):
            nets.Classifier(SMALL_CLF)(torch.zeros(1, 1, 63, 100))

    def test_layer_groups_cover_all(self):
        net = nets.Classifier()
        groups = net.layer_groups()
        assert len(groups) == 3
        assert groups[-1] == list(net.head.parameters())
        ids = [id(p) for g in groups for p in g]
        assert sorted(ids) == sorted(id(p) for p in net.parameters())
        assert len(net.layer_groups(1)) == 1


class TestDiceCe:
    def two_by_two(self):
        # class-1 probabilities 0.75, 0.5, 0.25, 0.5 from logit gaps ln3, 0, -ln3, 0
        l3 = math.log(3)
        logits = torch.tensor([[[[0.0, 0.0], [l3, 0.0]], [[l3, 0.0], [0.0, 0.0]]]],
                              dtype=torch.float64)
        target = torch.tensor([[[1, 0], [0, 1]]])
        return logits, target

    def test_hand_value(self):
        logits, target = self.two_by_two()
        # both classes: intersection 1.25, sum p 2, sum g 2 -> (2.5 + 1) / (4 + 1)
        dice = 1 - 0.7
        ce = -(math.log(0.75) + math.log(0.5)) / 2
        got = nets.dice_ce_loss(logits, target, nets.LossWeights(1.0, 1.0, 1.0))
        assert got.item() == pytest.approx(dice + ce, abs=1e-6)
        only_dice = nets.dice_ce_loss(logits, target, nets.LossWeights(1.0, 0.0, 1.0))
        assert only_dice.item() == pytest.approx(dice, abs=1e-6)

    def test_perfect_and_disjoint(self):
        target = torch.zeros(1, 16, 16, dtype=torch.long)
        target[:, :8] = 1
        onehot = torch.nn.functional.one_hot(target, 2).permute(0, 3, 1, 2).double()
        w = nets.LossWeights(1.0, 0.0, 1e-6)
        assert nets.dice_ce_loss(60 * onehot, target, w).item() < 1e-6
        assert nets.dice_ce_loss(60 * (1 - onehot), target, w).item() > 1 - 1e-6

    def test_non_negative(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(10):
            logits = torch.randn(2, 3, 5, 5, generator=g)
            target = torch.randint(0, 3, (2, 5, 5), generator=g)
            assert nets.dice_ce_loss(logits, target).item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            nets.dice_ce_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long))

    def test_bad_weights(self):
        with pytest.raises(ConfigError):
            nets.LossWeights(0.0, 0.0)
        with pytest.raises(ConfigError):
            nets.LossWeights(dice_smooth=0)


class TestLabelSmoothing:
    def test_hand_value(self):
        s = torch.softmax(torch.tensor([2.0, 0.0], dtype=torch.float64), 0)
        expected = -(0.95 * math.log(s[0]) + 0.05 * math.log(s[1]))
        got = nets.ce_label_smoothing(torch.tensor([[2.0, 0.0]], dtype=torch.float64),
                                      torch.tensor([0]), 0.1)
        assert got.item() == pytest.approx(expected, abs=1e-12)

    def test_eps_zero_is_ce(self):
        logits = torch.randn(6, 2, dtype=torch.float64)
        t = torch.tensor([0, 1, 1, 0, 1, 0])
        assert torch.allclose(nets.ce_label_smoothing(logits, t, 0.0),
                              torch.nn.functional.cross_entropy(logits, t))

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
    def test_uniform_logits(self, eps):
        got = nets.ce_label_smoothing(torch.zeros(4, 2), torch.tensor([0, 1, 0, 1]), eps)
        assert got.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_entropy_floor(self):
        eps = 0.2
        q = np.array([1 - eps / 2, eps / 2])
        floor = -(q * np.log(q)).sum()
        for seed in range(10):
            logits = torch.randn(8, 2, generator=torch.Generator().manual_seed(seed)) * 5
            t = torch.randint(0, 2, (8,), generator=torch.Generator().manual_seed(seed + 99))
            loss = nets.ce_label_smoothing(logits, t, eps, reduction="none")
            assert (loss >= floor - 1e-6).all()

    def test_bad_eps(self):
        with pytest.raises(ConfigError):
            nets.ce_label_smoothing(torch.zeros(1, 2), torch.tensor([0]), 1.0)


class TestGradients:
    def test_dice_ce(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            logits = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
            target = torch.randint(0, 3, (2, 4, 4), generator=g)
            w = nets.LossWeights(float(torch.rand(1, generator=g)) + 0.1, 1.0, 1.0)
            assert rel_error(lambda x: nets.dice_ce_loss(x, target, w), logits) <= 1e-4

    def test_label_smoothing(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(20):
            logits = torch.randn(5, 2, generator=g, dtype=torch.float64) * 3
            target = torch.randint(0, 2, (5,), generator=g)
            eps = float(torch.rand(1, generator=g)) * 0.5
            assert rel_error(lambda x: nets.ce_label_smoothing(x, target, eps), logits) <= 1e-4


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        net = nets.Classifier(SMALL_CLF).eval()
        path = nets.save_checkpoint(tmp_path / "c.pt", net, {"epoch": 3, "metric": 0.5})
        loaded, meta = nets.load_checkpoint(path)
        assert meta == {"epoch": 3, "metric": 0.5}
        x = torch.randn(2, 1, 64, 80)
        assert torch.equal(net(x), loaded(x))
        assert loaded.config == net.config

    def test_unet_roundtrip(self, tmp_path):
        net = small_unet().eval()
        loaded, _ = nets.load_checkpoint(nets.save_checkpoint(tmp_path / "u.pt", net))
        x = torch.randn(1, 1, 32, 32)
        assert torch.equal(net(x), loaded(x))

    def test_missing(self, tmp_path):
        with pytest.raises(UpstreamMissingError):
            nets.load_checkpoint(tmp_path / "nope.pt")

    def test_foreign_file(self, tmp_path):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        with pytest.raises(ConfigError):
            nets.load_checkpoint(tmp_path / "x.pt")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            nets.build_model("resnet", {})
