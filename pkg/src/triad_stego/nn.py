"""Layer primitives, gradient plumbing and Adam on top of PyTorch.

Tensors are plain ``torch.Tensor`` in (batch, channels, height, width)
layout. Training runs in float32; the finite-difference checker runs in
float64.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as tnn
import torch.nn.functional as F

from .errors import ConfigurationError, NonFiniteError

ADAM_DEFAULTS = dict(lr=1e-4, betas=(0.9, 0.999), eps=1e-8)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ConfigurationError(f"conv2d needs 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs kernels {tuple(weight.shape)}")
    kh, kw = weight.shape[2:]
    out_h = (x.shape[2] + 2 * padding - kh) // stride + 1
    out_w = (x.shape[3] + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError(
            f"conv2d output would be empty: input {tuple(x.shape)}, kernels {tuple(weight.shape)}, padding {padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batch_norm(x: torch.Tensor, bn: tnn.BatchNorm2d, mode: str = "train") -> torch.Tensor:
    """Batch normalization with explicit mode; ``inference`` uses running statistics."""
    if mode not in ("train", "inference"):
        raise ConfigurationError(f"unknown batch-norm mode {mode!r}")
    training = mode == "train"
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ConfigurationError("batch norm in train mode needs at least 2 values per channel")
    return F.batch_norm(x, bn.running_mean, bn.running_var, bn.weight, bn.bias,
                        training=training, momentum=bn.momentum, eps=bn.eps)


def truncate(x: torch.Tensor, threshold: float) -> torch.Tensor:
    return torch.clamp(x, -threshold, threshold)


def activation(x: torch.Tensor, kind: str | None, alpha: float = 0.01, threshold: float = 3.0) -> torch.Tensor:
    if kind in (None, "linear"):
        return x
    if kind == "relu":
        return F.relu(x)
    if kind == "leaky_relu":
        return F.leaky_relu(x, alpha)
    if kind == "tanh":
        return torch.tanh(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "abs":
        return torch.abs(x)
    if kind == "tlu":
        return truncate(x, threshold)
    raise ConfigurationError(f"unknown activation {kind!r}")


class BatchNorm(tnn.BatchNorm2d):
    """BatchNorm2d routed through :func:`batch_norm` so the mode is explicit."""

    def forward(self, x):
        return batch_norm(x, self, "train" if self.training else "inference")


class ConvBlock(tnn.Module):
    """Conv (odd kernel, stride 1, same padding) -> optional BN -> activation.

    The conv bias is dropped when BN follows, since BN's shift absorbs it.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, act: str | None = "leaky_relu",
                 bn: bool = True, bias: bool | None = None, alpha: float = 0.01):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd, got {kernel}")
        self.conv = tnn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=not bn if bias is None else bias)
        self.bn = BatchNorm(out_ch) if bn else None
        self.act = act
        self.alpha = alpha

    def forward(self, x):
        x = conv2d(x, self.conv.weight, self.conv.bias, padding=self.conv.padding[0])
        if self.bn is not None:
            x = self.bn(x)
        return activation(x, self.act, self.alpha)


def set_trainable(module: tnn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def make_adam(params: Iterable[torch.Tensor], **overrides) -> torch.optim.Adam:
    opts = {**ADAM_DEFAULTS, **overrides}
    return torch.optim.Adam([p for p in params if p.requires_grad], **opts)


def backprop(loss: torch.Tensor, named_params: Iterable[tuple[str, torch.Tensor]],
             retain_graph: bool = False) -> None:
    """Write d(loss)/d(param) into ``.grad`` for the given trainable parameters.

    Parameters with ``requires_grad=False`` are skipped. Raises
    :class:`NonFiniteError` naming the first parameter whose gradient is not
    finite; in that case no ``.grad`` is modified.
    """
    if loss.dim() != 0:
        raise ValueError("backprop expects a scalar loss")
    if not torch.isfinite(loss):
        raise NonFiniteError(f"loss is not finite ({loss.item()})")
    named = [(n, p) for n, p in named_params if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], retain_graph=retain_graph,
                                allow_unused=True)
    for (name, _), g in zip(named, grads):
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
    for (_, p), g in zip(named, grads):
        p.grad = torch.zeros_like(p) if g is None else g.detach()


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dominating."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_difference_check(loss_fn: Callable[[], torch.Tensor], tensors: Iterable[torch.Tensor],
                            eps: float = 1e-4, max_coords: int | None = None, seed: int = 0,
                            floor: float = 1e-6) -> float:
    """Compare autograd against central differences; returns the max relative error.

    ``loss_fn`` must recompute the scalar loss from the current tensor values.
    With ``max_coords`` set, that many coordinates per tensor are sampled.
    """
    tensors = list(tensors)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_coords is not None and idx.size > max_coords:
            idx = rng.choice(idx, size=max_coords, replace=False)
        numeric = np.empty(idx.size)
        with torch.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * eps)
        worst = max(worst, max_relative_error(g.reshape(-1)[idx].detach().numpy(), numeric, floor))
    return worst
