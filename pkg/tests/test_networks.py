import numpy as np
import pytest
import torch
import torch.nn as nn

from demakeup import networks
from demakeup.networks import (
    AttentionNet,
    ExtractorError,
    Generator,
    PatchDiscriminator,
    TorchScriptExtractor,
    ToyFeatureExtractor,
    architecture_fingerprint,
    initialize_weights,
    load_extractor,
    unet_depth,
)


def seeded(net, seed=0):
    initialize_weights(net, torch.Generator().manual_seed(seed))
    return net


def zero_head(net):
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net


class TestGenerator:
    def test_zero_head_gives_zero_residual_and_identity_output(self):
        g = zero_head(seeded(Generator(32)))
        x = torch.rand(2, 3, 32, 32) * 2 - 1
        residual, z = g(x)
        assert not residual.abs().any()
        assert torch.equal(z, x)

    def test_clamp_at_boundary(self):
        g = seeded(Generator(32))
        with torch.no_grad():
            g.head.weight.zero_()
            g.head.bias.fill_(5.0)  # tanh(5) ~ 0.9999 positive residual everywhere
        x = torch.ones(1, 3, 32, 32)
        _, z = g(x)
        assert torch.equal(z, torch.ones_like(z))

    def test_random_params_shape_and_range_64px(self):
        g = seeded(Generator(64), seed=3)
        x = torch.rand(2, 3, 64, 64) * 2 - 1
        with torch.no_grad():
            residual, z = g(x)
        assert residual.shape == (2, 3, 64, 64)
        assert z.shape == (2, 3, 64, 64)
        assert float(z.min()) >= -1.0 and float(z.max()) <= 1.0
        assert float(residual.min()) >= -1.0 and float(residual.max()) <= 1.0

    def test_non_power_of_two_rejected(self):
        g = seeded(Generator(32))
        with pytest.raises(ValueError, match="power of two"):
            g(torch.zeros(1, 3, 48, 48))

    def test_depth_follows_image_size(self):
        assert unet_depth(32) == 3
        assert unet_depth(64) == 4
        assert unet_depth(256) == 6
        with pytest.raises(ValueError):
            unet_depth(48)


class TestAttentionNet:
    def test_saturated_positive_bias(self):
        a = seeded(AttentionNet(32))
        with torch.no_grad():
            a.head.weight.zero_()
            a.head.bias.fill_(20.0)
        out = a(torch.rand(1, 3, 32, 32) * 2 - 1)
        assert float((1.0 - out).abs().max()) <= 1e-6

    def test_saturated_negative_bias(self):
        a = seeded(AttentionNet(32))
        with torch.no_grad():
            a.head.weight.zero_()
            a.head.bias.fill_(-20.0)
        out = a(torch.rand(1, 3, 32, 32) * 2 - 1)
        assert float(out.abs().max()) <= 1e-6

    def test_random_params_strictly_inside_unit_interval(self):
        a = seeded(AttentionNet(32), seed=5)
        out = a(torch.rand(2, 3, 32, 32) * 2 - 1)
        assert out.shape == (2, 1, 32, 32)
        assert float(out.min()) > 0.0 and float(out.max()) < 1.0

    def test_backbones_differ_only_in_head(self):
        g = Generator(64)
        a = AttentionNet(64)
        g_shapes = {k: tuple(v.shape) for k, v in g.state_dict().items()}
        a_shapes = {k: tuple(v.shape) for k, v in a.state_dict().items()}
        assert set(g_shapes) == set(a_shapes)
        for key in g_shapes:
            if key.startswith("backbone."):
                assert g_shapes[key] == a_shapes[key]
        assert g_shapes["head.weight"][0] == 3
        assert a_shapes["head.weight"][0] == 1
        assert g_shapes["head.weight"][1:] == a_shapes["head.weight"][1:]


class TestPatchDiscriminator:
    def test_zero_params_give_half_everywhere(self):
        d = PatchDiscriminator()
        with torch.no_grad():
            for p in d.parameters():
                p.zero_()
        out = d(torch.rand(2, 3, 32, 32))
        assert torch.equal(out, torch.full_like(out, 0.5))

    def test_three_block_output_geometry(self):
        # 64 px through three stride-2 blocks plus a stride-1 head: 8x8 patches.
        d = seeded(PatchDiscriminator(num_blocks=3))
        out = d(torch.rand(2, 3, 64, 64))
        assert out.shape == (2, 1, 8, 8)

    def test_default_four_block_geometry(self):
        d = seeded(PatchDiscriminator())
        assert d(torch.rand(1, 3, 64, 64)).shape == (1, 1, 4, 4)

    def test_determinism(self):
        d = seeded(PatchDiscriminator(), seed=7)
        x = torch.rand(1, 3, 32, 32)
        assert torch.equal(d(x), d(x))

    def test_indivisible_input_rejected(self):
        d = seeded(PatchDiscriminator())
        with pytest.raises(ValueError, match="divisible"):
            d(torch.zeros(1, 3, 24, 24))


def toy_conv_oracle(extractor, image):
    """Hand-rolled forward through the first two blocks (loops only)."""

    def conv(x, weight, bias, stride=2, pad=1):
        cin, h, w = x.shape
        cout = weight.shape[0]
        k = weight.shape[2]
        padded = np.zeros((cin, h + 2 * pad, w + 2 * pad))
        padded[:, pad : pad + h, pad : pad + w] = x
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        out = np.zeros((cout, oh, ow))
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = bias[co]
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    weight[co, ci, ky, kx]
                                    * padded[ci, oy * stride + ky, ox * stride + kx]
                                )
                    out[co, oy, ox] = acc
        return out

    h = np.asarray(image, dtype=np.float64)
    for block in (extractor.blocks[0], extractor.blocks[1]):
        conv_layer = block[0]
        h = conv(
            h,
            conv_layer.weight.numpy().astype(np.float64),
            conv_layer.bias.numpy().astype(np.float64),
        )
        h = np.maximum(h, 0.0)
    return h


class TestToyFeatureExtractor:
    def test_embedding_dimension_is_256(self, toy_extractor):
        emb = toy_extractor.embed(torch.rand(2, 3, 32, 32))
        assert emb.shape == (2, 256)

    def test_determinism(self, toy_extractor):
        x = torch.rand(1, 3, 32, 32)
        assert torch.equal(toy_extractor.embed(x), toy_extractor.embed(x))
        assert torch.equal(toy_extractor.features_layer2(x), toy_extractor.features_layer2(x))

    def test_same_seed_same_parameters(self):
        a = ToyFeatureExtractor()
        b = ToyFeatureExtractor()
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_layer2_geometry_metadata(self, toy_extractor):
        channels, fh, fw = toy_extractor.feature_geometry(64, 64)
        feats = toy_extractor.features_layer2(torch.rand(1, 3, 64, 64))
        assert feats.shape == (1, channels, fh, fw)

    def test_parameters_are_frozen(self, toy_extractor):
        assert all(not p.requires_grad for p in toy_extractor.parameters())

    def test_gradient_flows_to_input_not_parameters(self, toy_extractor):
        x = (torch.rand(1, 3, 32, 32) * 2 - 1).requires_grad_(True)
        emb = toy_extractor.embed(x)
        emb.sum().backward()
        assert x.grad is not None and x.grad.abs().sum() > 0

    def test_zero_image_matches_hand_rolled_forward(self, toy_extractor):
        x = np.zeros((3, 8, 8))
        expected = toy_conv_oracle(toy_extractor, x)
        feats = toy_extractor.features_layer2(torch.zeros(1, 3, 8, 8))[0].numpy()
        assert np.abs(feats - expected).max() <= 1e-6
        assert np.abs(expected).max() > 0  # biases propagate, not all zero

    def test_random_image_matches_hand_rolled_forward(self, toy_extractor):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(3, 8, 8))
        expected = toy_conv_oracle(toy_extractor, x)
        feats = toy_extractor.features_layer2(
            torch.tensor(x[None], dtype=torch.float32)
        )[0].numpy()
        assert np.abs(feats - expected).max() <= 1e-5


class _ScriptedStub(nn.Module):
    def __init__(self, dim=256):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.proj = nn.Linear(16, dim)

    def forward(self, x):
        f1 = torch.relu(self.conv1(x))
        f2 = torch.relu(self.conv2(f1))
        emb = self.proj(f2.mean(dim=(2, 3)))
        return emb, f2


class TestTorchScriptExtractor:
    def test_loads_and_exposes_geometry(self, tmp_path):
        path = tmp_path / "ext.pt"
        torch.jit.script(_ScriptedStub()).save(str(path))
        ext = TorchScriptExtractor(path)
        assert ext.embedding_dim == 256
        assert ext.layer2_channels == 16
        assert ext.layer2_stride == 4
        emb, feat2 = ext.forward_full(torch.rand(2, 3, 32, 32))
        assert emb.shape == (2, 256)
        assert feat2.shape == (2, 16, 8, 8)
        assert all(not p.requires_grad for p in ext.parameters())

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ExtractorError, match="not loaded"):
            TorchScriptExtractor(tmp_path / "missing.pt")

    def test_wrong_embedding_width_raises(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.jit.script(_ScriptedStub(dim=64)).save(str(path))
        with pytest.raises(ExtractorError, match="embeds"):
            TorchScriptExtractor(path)

    def test_load_extractor_selector(self, tmp_path):
        assert isinstance(load_extractor("toy"), ToyFeatureExtractor)
        with pytest.raises(ExtractorError):
            load_extractor(str(tmp_path / "nope.pt"))


class TestFingerprint:
    def test_stable_and_sensitive(self):
        desc1, tag1 = architecture_fingerprint(64, 32, 256, 4, "toy", 256)
        desc2, tag2 = architecture_fingerprint(64, 32, 256, 4, "toy", 256)
        assert desc1 == desc2 and tag1 == tag2
        _, tag3 = architecture_fingerprint(128, 32, 256, 4, "toy", 256)
        assert tag3 != tag1


class TestForwardDeterminism:
    def test_generator_and_attention_pure_functions(self):
        g = seeded(Generator(32), seed=11)
        a = seeded(AttentionNet(32), seed=12)
        x = torch.rand(2, 3, 32, 32) * 2 - 1
        r1, z1 = g(x)
        r2, z2 = g(x)
        assert torch.equal(r1, r2) and torch.equal(z1, z2)
        assert torch.equal(a(x), a(x))
