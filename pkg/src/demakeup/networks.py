"""Networks: residual U-net generator, attention head on the same backbone,
patch discriminator, and the frozen feature extractor that supplies identity
embeddings and second-conv-layer texture features."""

from __future__ import annotations

import hashlib
import json
import math
import os

import torch
import torch.nn as nn

EMBEDDING_DIM = 256
TOY_EXTRACTOR_SEED = 7151


class ExtractorError(RuntimeError):
    """Feature extractor missing, unloadable, or incompatible."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def unet_depth(image_size: int) -> int:
    """Encoder depth log2(size) - 2, so the bottleneck sits at 4x4."""
    if not is_power_of_two(image_size) or image_size < 32:
        raise ValueError(f"image size must be a power of two >= 32, got {image_size}")
    return int(math.log2(image_size)) - 2


def initialize_weights(module: nn.Module, generator: torch.Generator) -> None:
    """normal(0, 0.02) conv weights, zero biases, drawn from `generator`."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def _check_image_batch(x: torch.Tensor, depth: int) -> None:
    if x.ndim != 4 or x.size(1) != 3:
        raise ValueError(f"expected an Nx3xHxW batch, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h != w or not is_power_of_two(h):
        raise ValueError(f"spatial size must be a square power of two, got {h}x{w}")
    # Pipeline images are >= 32 px (enforced by the training config); the
    # forward itself only needs a non-empty bottleneck, which lets gradient
    # diagnostics run on smaller inputs.
    if h < (1 << depth):
        raise ValueError(f"input {h}x{w} too small for U-net depth {depth}")


class UNetBackbone(nn.Module):
    """Stride-2 conv encoder mirrored by a transposed-conv decoder with skip
    concatenation; emits a base_channels feature map at input resolution."""

    def __init__(self, image_size: int, base_channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.image_size = image_size
        self.depth = unet_depth(image_size)
        chans = [min(base_channels << k, max_channels) for k in range(self.depth)]
        self.encoders = nn.ModuleList()
        cin = 3
        for k, cout in enumerate(chans):
            block = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
            if k > 0:
                block.append(nn.InstanceNorm2d(cout))
            block.append(nn.LeakyReLU(0.2))
            self.encoders.append(nn.Sequential(*block))
            cin = cout
        self.decoders = nn.ModuleList()
        for k in reversed(range(self.depth)):
            cout = chans[k - 1] if k > 0 else base_channels
            self.decoders.append(
                nn.Sequential(
                    nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                    nn.InstanceNorm2d(cout),
                    nn.ReLU(),
                )
            )
            cin = cout + (chans[k - 1] if k > 0 else 0)
        self.out_channels = base_channels

    def forward(self, x):
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        for i, dec in enumerate(self.decoders):
            h = dec(h)
            skip_idx = self.depth - 2 - i
            if skip_idx >= 0:
                h = torch.cat([h, skips[skip_idx]], dim=1)
        return h


class Generator(nn.Module):
    """Residual generator: Z = clamp(X + tanh(head(backbone(X))), -1, 1)."""

    def __init__(self, image_size: int, base_channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.backbone = UNetBackbone(image_size, base_channels, max_channels)
        self.head = nn.Conv2d(self.backbone.out_channels, 3, 3, stride=1, padding=1)

    def forward(self, x):
        """Returns (residual, z), both Nx3xHxW in [-1, 1]."""
        _check_image_batch(x, self.backbone.depth)
        residual = torch.tanh(self.head(self.backbone(x)))
        z = torch.clamp(x + residual, -1.0, 1.0)
        return residual, z


class AttentionNet(nn.Module):
    """Generator backbone with a 1-channel sigmoid head; output in [0, 1]."""

    def __init__(self, image_size: int, base_channels: int = 32, max_channels: int = 256):
        super().__init__()
        self.backbone = UNetBackbone(image_size, base_channels, max_channels)
        self.head = nn.Conv2d(self.backbone.out_channels, 1, 3, stride=1, padding=1)

    def forward(self, x):
        _check_image_batch(x, self.backbone.depth)
        return torch.sigmoid(self.head(self.backbone(x)))


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack emitting a grid of per-patch real probabilities."""

    def __init__(self, base_channels: int = 32, max_channels: int = 256, num_blocks: int = 4):
        super().__init__()
        self.num_blocks = num_blocks
        layers = []
        cin = 3
        for k in range(num_blocks):
            cout = min(base_channels << k, max_channels)
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            if k > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, img):
        if img.ndim != 4 or img.size(1) != 3:
            raise ValueError(f"expected an Nx3xHxW batch, got shape {tuple(img.shape)}")
        h, w = img.shape[-2:]
        stride = 1 << self.num_blocks
        if h % stride or w % stride:
            raise ValueError(f"input {h}x{w} not divisible by total stride {stride}")
        return torch.sigmoid(self.body(img))


class ToyFeatureExtractor(nn.Module):
    """Small fixed-seed CNN standing in for a pretrained identity network.

    Four stride-2 conv blocks; global average pooling of the last block gives
    the 256-d embedding, and the second block's activation is the texture
    feature map. Parameters are frozen at construction and receive no
    gradients; gradients still flow through the module into its input.
    """

    name = "toy"
    embedding_dim = EMBEDDING_DIM
    layer2_stride = 4

    def __init__(self, seed: int = TOY_EXTRACTOR_SEED):
        super().__init__()
        chans = (32, 64, 128, 256)
        blocks = []
        cin = 3
        for cout in chans:
            blocks.append(nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.layer2_channels = chans[1]
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    # He-scaled weights keep activations O(1) through the
                    # stack; nonzero biases so a zero image maps to nonzero
                    # features.
                    m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                    m.bias.normal_(0.0, 0.05, generator=gen)
        self.requires_grad_(False)
        self.eval()

    def forward_full(self, img):
        """Returns (embedding Nx256, layer-2 features NxCxH/4xW/4)."""
        if img.ndim != 4 or img.size(1) != 3:
            raise ValueError(f"expected an Nx3xHxW batch, got shape {tuple(img.shape)}")
        h = img
        feat2 = None
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i == 1:
                feat2 = h
        return h.mean(dim=(2, 3)), feat2

    def embed(self, img):
        return self.forward_full(img)[0]

    def features_layer2(self, img):
        return self.forward_full(img)[1]

    def feature_geometry(self, height: int, width: int):
        """(channels, h', w') of the layer-2 feature map for a given input size."""
        return self.layer2_channels, height // self.layer2_stride, width // self.layer2_stride


class TorchScriptExtractor:
    """Adapter for an external pretrained identity network.

    Expects a TorchScript module whose forward(img) returns a tuple
    (embedding NxD, layer2_features NxCxH'xW'). Geometry is probed with a
    dummy input at load time; parameters are frozen.
    """

    def __init__(self, path, embedding_dim: int = EMBEDDING_DIM, probe_size: int = 32):
        if not os.path.exists(path):
            raise ExtractorError(f"extractor not loaded: no such file {path!r}")
        try:
            module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise ExtractorError(f"extractor not loaded: cannot read {path!r}: {exc}") from exc
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self._module = module
        with torch.no_grad():
            out = module(torch.zeros(1, 3, probe_size, probe_size))
        if not (isinstance(out, (tuple, list)) and len(out) == 2):
            raise ExtractorError("external extractor must return (embedding, layer2_features)")
        emb, feat2 = out
        if emb.ndim != 2 or emb.shape[1] != embedding_dim:
            raise ExtractorError(
                f"external extractor embeds to {tuple(emb.shape)}, expected (N, {embedding_dim})"
            )
        if feat2.ndim != 4 or probe_size % feat2.shape[2]:
            raise ExtractorError("external extractor layer-2 features must be NxCxH'xW'")
        self.embedding_dim = embedding_dim
        self.layer2_channels = int(feat2.shape[1])
        self.layer2_stride = probe_size // int(feat2.shape[2])
        self.name = f"torchscript:{os.path.basename(str(path))}"

    def forward_full(self, img):
        return self._module(img)

    def embed(self, img):
        return self.forward_full(img)[0]

    def features_layer2(self, img):
        return self.forward_full(img)[1]

    def feature_geometry(self, height: int, width: int):
        return self.layer2_channels, height // self.layer2_stride, width // self.layer2_stride

    def parameters(self):
        return self._module.parameters()


def load_extractor(selector: str):
    """'toy' builds the fixed-seed stand-in; anything else is a TorchScript path."""
    if selector == "toy":
        return ToyFeatureExtractor()
    return TorchScriptExtractor(selector)


def architecture_fingerprint(
    image_size: int,
    base_channels: int,
    max_channels: int,
    disc_blocks: int,
    extractor_name: str,
    embedding_dim: int,
):
    """Canonical architecture description plus its sha256-derived tag."""
    desc = {
        "format": 1,
        "image_size": int(image_size),
        "unet_depth": unet_depth(image_size),
        "base_channels": int(base_channels),
        "max_channels": int(max_channels),
        "disc_blocks": int(disc_blocks),
        "extractor": str(extractor_name),
        "embedding_dim": int(embedding_dim),
    }
    digest = hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]
    return desc, digest
