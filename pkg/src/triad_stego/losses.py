"""Loss terms of the three agents.

Every function accepts numpy arrays or torch tensors; torch inputs keep
their autograd graph. Batched tensors are reduced per image and then
averaged over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

SCORE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.2
    lambda_b: float = 0.4
    lambda_e: float = 0.4
    beta: float = 0.0
    # "abs": lambda_a * |dist - beta| pulls the change rate toward beta.
    # "linear": lambda_a * (dist - beta); beta is then a constant offset.
    beta_mode: str = "abs"

    def __post_init__(self):
        lams = (self.lambda_a, self.lambda_b, self.lambda_e)
        if any(not 0 <= v <= 1 for v in lams):
            raise ConfigurationError(f"loss weights must lie in [0, 1], got {lams}")
        if not math.isclose(sum(lams), 1.0, abs_tol=1e-9):
            raise ConfigurationError(f"loss weights must sum to 1, got {sum(lams)}")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if self.beta_mode not in ("abs", "linear"):
            raise ConfigurationError(f"unknown beta_mode {self.beta_mode!r}")


def _t(v):
    return v if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=np.float64))


def _out(v, *inputs):
    return v if any(isinstance(i, torch.Tensor) for i in inputs) else float(v)


def eve_loss(label, score):
    """Binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    l, p = _t(label), _t(score)
    p = torch.clamp(p, SCORE_CLAMP, 1 - SCORE_CLAMP)
    loss = -(l * torch.log(p) + (1 - l) * torch.log(1 - p))
    return _out(loss.mean(), label, score)


def bob_loss_message(m, m_hat):
    m, m_hat = _t(m), _t(m_hat)
    if m.shape != m_hat.shape:
        raise ValueError(f"message shapes differ: {tuple(m.shape)} vs {tuple(m_hat.shape)}")
    if m.numel() == 0:
        raise ValueError("empty message")
    return _out(((m - m_hat) ** 2).mean(), m, m_hat)


def bob_loss_spread(s, s_hat, omega, m_len=None):
    """Masked squared error on the spread map, divided by the message length.

    For batched (B, 1, H, W) inputs the per-image losses are averaged, each
    image using its own mask count.
    """
    s_, sh_, om_ = _t(s), _t(s_hat), _t(omega)
    if not (s_.shape == sh_.shape == om_.shape):
        raise ValueError("spread map, estimate and mask must share a shape")
    om_ = om_.to(sh_.dtype)
    if s_.dim() <= 2:
        count = om_.sum()
        if m_len is not None and int(count.item()) != m_len:
            raise ValueError(f"mask holds {int(count.item())} cells but message has {m_len} bits")
        if count == 0:
            raise ValueError("empty message")
        return _out((((s_ - sh_) * om_) ** 2).sum() / count, s, s_hat, omega)
    dims = tuple(range(1, s_.dim()))
    count = om_.sum(dim=dims)
    if (count == 0).any():
        raise ValueError("empty message in batch")
    per_image = (((s_ - sh_) * om_) ** 2).sum(dim=dims) / count
    return _out(per_image.mean(), s, s_hat, omega)


def pixel_dist_mse(x, y):
    x, y = _t(x), _t(y)
    return _out(((x - y) ** 2).mean(), x, y)


def modmap_dist(n):
    return _out(_t(n).abs().mean(), n)


def alice_loss_v1(dist, l_bob, l_eve, w: LossWeights):
    return w.lambda_a * dist + w.lambda_b * l_bob - w.lambda_e * l_eve


def alice_loss_v23(dist, l_bob, l_eve, w: LossWeights):
    gap = dist - w.beta
    if w.beta_mode == "abs":
        gap = abs(gap)
    return w.lambda_a * gap + w.lambda_b * l_bob - w.lambda_e * l_eve


def bob_loss_v3(l_cover_recons, l_message_extract):
    return 0.5 * (l_cover_recons + l_message_extract)
