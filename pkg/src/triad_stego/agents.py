"""Embedder (Alice), extractor (Bob) and steganalyzer (Eve) networks.

All images enter the networks normalized to [0, 1]. Message maps ``s`` are
(B, 1, H, W) tensors holding the spread bits. Stego noise ``n`` is kept in
grey-level units, so a ternary map takes values in {-1, 0, 1} and the stego
is ``x + n / 255``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as tnn
import torch.nn.functional as F

from .errors import ConfigurationError
from .nn import BatchNorm, ConvBlock, activation, conv2d
from .srm import srm_weight


class SRMLayer(tnn.Module):
    """SRM-F: 5x5 conv initialized with the 30-kernel bank."""

    def __init__(self, trainable: bool = True):
        super().__init__()
        self.weight = tnn.Parameter(srm_weight(), requires_grad=trainable)

    def forward(self, x):
        return conv2d(x, self.weight, padding=2)


class ConvStack(tnn.Module):
    def __init__(self, in_ch: int, widths: list[int], out_ch: int | None = None,
                 out_act: str | None = None, kernel: int = 3, act: str = "leaky_relu"):
        super().__init__()
        layers: list[tnn.Module] = []
        ch = in_ch
        for w in widths:
            layers.append(ConvBlock(ch, w, kernel, act=act))
            ch = w
        self.body = tnn.Sequential(*layers)
        self.out_ch = ch
        self.head = None
        if out_ch is not None:
            self.head = ConvBlock(ch, out_ch, kernel, act=out_act, bn=False)
            self.out_ch = out_ch

    def forward(self, x):
        x = self.body(x)
        return x if self.head is None else self.head(x)


@dataclass
class AgentConfig:
    """Layer sizes for all agents. Defaults follow the package's desk-scale choices."""

    alice_widths: list[int] = field(default_factory=lambda: [32] * 5)
    bob_stack1_widths: list[int] = field(default_factory=lambda: [32] * 4)
    bob_stack2_widths: list[int] = field(default_factory=lambda: [16] * 3)
    unet_depth: int = 3
    unet_base: int = 16
    eve_channels: list[int] = field(default_factory=lambda: [30, 30, 32, 64, 128])
    eve_fc: list[int] = field(default_factory=lambda: [256, 1024])
    srm_trainable_alice_bob: bool = True
    srm_trainable_eve: bool = False


def _check_pair(x, s):
    if x.shape != s.shape:
        raise ConfigurationError(f"cover {tuple(x.shape)} and message map {tuple(s.shape)} differ in shape")


class AliceV1(tnn.Module):
    """Direct stego synthesis: ``y~ = x + conv_Stack0(SRM(x) ++ s) / 255``.

    The cover is added back through a skip path so that only the stego noise
    is learned.
    """

    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.srm = SRMLayer(cfg.srm_trainable_alice_bob)
        self.stack = ConvStack(31, cfg.alice_widths, out_ch=1, out_act=None)

    def forward(self, x, s):
        _check_pair(x, s)
        return x + self.stack(torch.cat([self.srm(x), s], dim=1)) / 255.0


class AliceV23(tnn.Module):
    """Modification-map generator: ``n = tanh(conv_Stack3(SRM(x) ++ s))`` in [-1, 1]."""

    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.srm = SRMLayer(cfg.srm_trainable_alice_bob)
        self.stack = ConvStack(31, cfg.alice_widths, out_ch=1, out_act="tanh")

    def forward(self, x, s):
        _check_pair(x, s)
        return self.stack(torch.cat([self.srm(x), s], dim=1))


class BobHead(tnn.Module):
    """conv_Stack1 followed by conv_Stack2 with a sigmoid output map."""

    def __init__(self, in_ch: int, cfg: AgentConfig):
        super().__init__()
        self.stack1 = ConvStack(in_ch, cfg.bob_stack1_widths)
        self.stack2 = ConvStack(self.stack1.out_ch, cfg.bob_stack2_widths, out_ch=1, out_act="sigmoid")

    def forward(self, features):
        return self.stack2(self.stack1(features))


class BobV1(tnn.Module):
    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.srm = SRMLayer(cfg.srm_trainable_alice_bob)
        self.head = BobHead(30, cfg)

    def forward(self, y):
        return self.head(self.srm(y))


class UNet(tnn.Module):
    """Encoder/decoder with skip connections; upsampling is nearest x2 then conv."""

    def __init__(self, depth: int = 3, base: int = 16, in_ch: int = 1, out_ch: int = 1):
        super().__init__()
        self.depth = depth
        widths = [base * 2**i for i in range(depth + 1)]
        self.down = tnn.ModuleList()
        ch = in_ch
        for w in widths[:-1]:
            self.down.append(tnn.Sequential(ConvBlock(ch, w, act="relu"), ConvBlock(w, w, act="relu")))
            ch = w
        self.bottom = tnn.Sequential(ConvBlock(ch, widths[-1], act="relu"),
                                     ConvBlock(widths[-1], widths[-1], act="relu"))
        self.up = tnn.ModuleList()
        self.merge = tnn.ModuleList()
        ch = widths[-1]
        for w in reversed(widths[:-1]):
            self.up.append(ConvBlock(ch, w, act="relu"))
            self.merge.append(tnn.Sequential(ConvBlock(2 * w, w, act="relu"), ConvBlock(w, w, act="relu")))
            ch = w
        self.out = ConvBlock(ch, out_ch, kernel=1, act=None, bn=False)

    def forward(self, x):
        factor = 2**self.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigurationError(
                f"U-Net of depth {self.depth} needs sizes divisible by {factor}, got {tuple(x.shape[2:])}")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        x = self.bottom(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = merge(torch.cat([x, skip], dim=1))
        return self.out(x)


class SourceSeparator(tnn.Module):
    """The g' coupler: split a stego into a cover estimate and a noise estimate.

    The U-Net predicts the noise in grey levels (tanh-bounded); the cover
    estimate is derived from it, so ``x' + n'/255 == y`` holds by construction.
    """

    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.unet = UNet(cfg.unet_depth, cfg.unet_base)

    def forward(self, y):
        n_prime = torch.tanh(self.unet(y))
        x_prime = y - n_prime / 255.0
        return x_prime, n_prime


class BobV3(tnn.Module):
    """Source separation, then ``s^ = conv_Stack1/2(SRM(x') ++ n')``."""

    def __init__(self, cfg: AgentConfig):
        super().__init__()
        self.separator = SourceSeparator(cfg)
        self.srm = SRMLayer(cfg.srm_trainable_alice_bob)
        self.head = BobHead(31, cfg)

    def forward(self, y, return_parts: bool = False):
        x_prime, n_prime = self.separator(y)
        s_hat = self.head(torch.cat([self.srm(x_prime), n_prime], dim=1))
        if return_parts:
            return s_hat, x_prime, n_prime
        return s_hat


class Eve(tnn.Module):
    """Yedroudj-Net-style steganalyzer returning P(stego) per image.

    Fixed SRM preprocessing, five conv blocks (ABS + truncation in the first
    two, average pooling from the second on, global pooling at the end) and
    a three-layer fully connected classifier.
    """

    def __init__(self, cfg: AgentConfig | None = None, image_size: tuple[int, int] | None = None):
        super().__init__()
        cfg = cfg or AgentConfig()
        c = cfg.eve_channels
        if len(c) != 5:
            raise ConfigurationError("Eve needs exactly five conv block widths")
        self.image_size = tuple(image_size) if image_size else None
        self.srm = SRMLayer(cfg.srm_trainable_eve)
        self.conv1 = tnn.Conv2d(30, c[0], 5, padding=2, bias=False)
        self.bn1 = BatchNorm(c[0])
        self.conv2 = tnn.Conv2d(c[0], c[1], 5, padding=2, bias=False)
        self.bn2 = BatchNorm(c[1])
        self.blocks = tnn.ModuleList([
            ConvBlock(c[1], c[2], 3, act="relu"),
            ConvBlock(c[2], c[3], 3, act="relu"),
            ConvBlock(c[3], c[4], 3, act="relu"),
        ])
        fc = [c[4], *cfg.eve_fc, 1]
        self.fc = tnn.ModuleList([tnn.Linear(a, b) for a, b in zip(fc[:-1], fc[1:])])

    def logits(self, z):
        if self.image_size is not None and tuple(z.shape[2:]) != self.image_size:
            raise ConfigurationError(f"Eve expects {self.image_size} images, got {tuple(z.shape[2:])}")
        if z.shape[1] != 1:
            raise ConfigurationError("Eve takes single-channel images")
        h = self.srm(z)
        h = activation(self.bn1(torch.abs(self.conv1(h))), "tlu", threshold=3.0)
        h = activation(self.bn2(self.conv2(h)), "tlu", threshold=2.0)
        h = F.avg_pool2d(h, 5, stride=2, padding=2)
        for i, block in enumerate(self.blocks):
            h = block(h)
            h = F.avg_pool2d(h, 5, stride=2, padding=2) if i < 2 else h.mean(dim=(2, 3))
        for i, layer in enumerate(self.fc):
            h = layer(h)
            if i < len(self.fc) - 1:
                h = F.relu(h)
        return h.squeeze(1)

    def forward(self, z):
        return torch.sigmoid(self.logits(z))


# discretization with straight-through gradients

class _RoundImage(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y):
        ctx.save_for_backward(y)
        return discretize_image_values(y)

    @staticmethod
    def backward(ctx, grad):
        (y,) = ctx.saved_tensors
        inside = (y >= 0) & (y <= 1)
        return grad * inside.to(grad.dtype)


class _RoundTernary(torch.autograd.Function):
    @staticmethod
    def forward(ctx, n):
        return ternary_values(n)

    @staticmethod
    def backward(ctx, grad):
        return grad


def _round_half_away(t: torch.Tensor) -> torch.Tensor:
    return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)


def discretize_image_values(y: torch.Tensor) -> torch.Tensor:
    """Forward part of the image discretizer: nearest valid 8-bit level, renormalized."""
    return torch.clamp(_round_half_away(255.0 * y), 0, 255) / 255.0


def ternary_values(n: torch.Tensor) -> torch.Tensor:
    return torch.clamp(_round_half_away(n), -1, 1)


def discretize_image(y: torch.Tensor) -> torch.Tensor:
    """Round to 8-bit levels; gradient passes unchanged inside [0, 1], zero outside."""
    return _RoundImage.apply(y)


def ternary_discretize(n: torch.Tensor) -> torch.Tensor:
    """Round to {-1, 0, 1} (half away from zero) with an identity gradient."""
    return _RoundTernary.apply(n)


def add_noise(x: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """The g coupler on normalized tensors: ``clamp(x + n/255, 0, 1)``."""
    return torch.clamp(x + n / 255.0, 0.0, 1.0)


def apply_mod_map(cover: np.ndarray, n: np.ndarray) -> np.ndarray:
    """The g coupler on 8-bit images: ``clamp(x + n, 0, 255)``."""
    n = np.asarray(n)
    if cover.shape != n.shape:
        raise ConfigurationError(f"cover {cover.shape} and modification map {n.shape} differ in shape")
    if not np.isin(n, (-1, 0, 1)).all():
        raise ValueError("modification map must be ternary")
    return np.clip(cover.astype(np.int16) + n.astype(np.int16), 0, 255).astype(np.uint8)


class AliceBob(tnn.Module):
    """One architecture's embedder/extractor pair plus the discretization switch."""

    def __init__(self, arch: int, cfg: AgentConfig | None = None):
        super().__init__()
        if arch not in (1, 2, 3):
            raise ConfigurationError(f"architecture must be 1, 2 or 3, got {arch}")
        cfg = cfg or AgentConfig()
        self.arch = arch
        self.alice = AliceV1(cfg) if arch == 1 else AliceV23(cfg)
        self.bob = BobV3(cfg) if arch == 3 else BobV1(cfg)
        self.discretize = False

    def embed(self, x, s):
        """Return ``(stego, noise)``; noise is ``None`` for architecture 1.

        With discretization enabled the stego sits exactly on 8-bit levels and
        the architecture-2/3 noise is ternary.
        """
        if self.arch == 1:
            y = self.alice(x, s)
            return (discretize_image(y) if self.discretize else y), None
        n = self.alice(x, s)
        if self.discretize:
            n = ternary_discretize(n)
            # snapping removes float error of x + n/255; the gradient is unaffected
            return discretize_image(add_noise(x, n)), n
        return add_noise(x, n), n

    def extract(self, y, return_parts: bool = False):
        if self.arch == 3:
            return self.bob(y, return_parts=return_parts)
        s_hat = self.bob(y)
        return (s_hat, None, None) if return_parts else s_hat
