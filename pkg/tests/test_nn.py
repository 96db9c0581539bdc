import numpy as np
import pytest
import torch

from triad_stego import nn as tsnn
from triad_stego.errors import ConfigurationError, NonFiniteError

import gradcases


def naive_conv(x, w, padding):
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = np.zeros((b, o, oh, ow))
    for n in range(b):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[n, k, i, j] += xp[n, ci, i + u, j + v] * w[k, ci, u, v]
    return out


def test_conv_identity_kernel():
    x = torch.full((1, 1, 3, 3), 5.0)
    out = tsnn.conv2d(x, torch.ones(1, 1, 1, 1))
    assert torch.equal(out, x)


def test_conv_zero_sum_kernel_kills_constants():
    w = torch.tensor([[[[1.0, -2.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]])
    out = tsnn.conv2d(torch.full((1, 1, 6, 6), 0.37, dtype=torch.float64), w.double())
    assert out.abs().max() < 1e-15


@pytest.mark.parametrize("padding", [0, 1])
def test_conv_matches_loop_reference(padding):
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(4, 2, 3, 3))
    out = tsnn.conv2d(torch.from_numpy(x), torch.from_numpy(w), padding=padding).numpy()
    assert out.shape == (1, 4, 8 - 2 + 2 * padding, 8 - 2 + 2 * padding)
    assert np.abs(out - naive_conv(x, w, padding)).max() < 1e-10


def test_conv_shape_errors_report_both_shapes():
    with pytest.raises(ConfigurationError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
        tsnn.conv2d(torch.zeros(1, 3, 4, 4), torch.zeros(2, 2, 3, 3))
    with pytest.raises(ConfigurationError):
        tsnn.conv2d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 5, 5))


def test_conv_linearity():
    g = torch.Generator().manual_seed(1)
    x, z = torch.randn(2, 3, 7, 7, generator=g, dtype=torch.float64), torch.randn(2, 3, 7, 7, generator=g, dtype=torch.float64)
    w = torch.randn(5, 3, 3, 3, generator=g, dtype=torch.float64)
    lhs = tsnn.conv2d(1.7 * x - 0.4 * z, w, padding=1)
    rhs = 1.7 * tsnn.conv2d(x, w, padding=1) - 0.4 * tsnn.conv2d(z, w, padding=1)
    assert (lhs - rhs).abs().max() < 1e-9


def test_batch_norm_normalizes():
    x = torch.randn(4, 3, 5, 5, dtype=torch.float64) * 7 + 2
    bn = tsnn.BatchNorm(3).double()
    out = tsnn.batch_norm(x, bn, "train")
    assert out.mean(dim=(0, 2, 3)).abs().max() < 1e-6


def test_batch_norm_affine():
    x = torch.randn(8, 2, 6, 6, dtype=torch.float64)
    bn = tsnn.BatchNorm(2).double()
    with torch.no_grad():
        bn.weight.fill_(2.0)
        bn.bias.fill_(3.0)
    out = tsnn.batch_norm(x, bn, "train")
    assert torch.allclose(out.mean(dim=(0, 2, 3)), torch.full((2,), 3.0, dtype=torch.float64), atol=1e-4)
    assert torch.allclose(out.std(dim=(0, 2, 3), unbiased=False), torch.full((2,), 2.0, dtype=torch.float64), atol=1e-4)


def test_batch_norm_inference_is_deterministic_and_zero_variance_safe():
    bn = tsnn.BatchNorm(2)
    tsnn.batch_norm(torch.randn(4, 2, 3, 3), bn, "train")
    x = torch.randn(2, 2, 3, 3)
    assert torch.equal(tsnn.batch_norm(x, bn, "inference"), tsnn.batch_norm(x, bn, "inference"))
    flat = tsnn.batch_norm(torch.ones(2, 2, 3, 3), tsnn.BatchNorm(2), "train")
    assert torch.isfinite(flat).all()
    with pytest.raises(ConfigurationError):
        tsnn.batch_norm(torch.ones(1, 2, 1, 1), bn, "train")
    with pytest.raises(ConfigurationError):
        tsnn.batch_norm(x, bn, "eval")


def test_activation_examples():
    t = torch.tensor([-2.0, 0.0, 3.0])
    assert tsnn.activation(t, "relu").tolist() == [0, 0, 3]
    assert tsnn.activation(torch.zeros(1), "tanh").item() == 0
    assert tsnn.activation(torch.zeros(1), "sigmoid").item() == 0.5
    assert tsnn.activation(torch.tensor([-2.0]), "leaky_relu", alpha=0.1).item() == pytest.approx(-0.2)
    big = torch.tensor([-50.0, 50.0])
    assert tsnn.activation(big, "tanh").abs().max() <= 1
    s = tsnn.activation(torch.tensor([-10.0, 10.0]), "sigmoid")
    assert (s > 0).all() and (s < 1).all()
    with pytest.raises(ConfigurationError):
        tsnn.activation(t, "swish")


def test_conv_block_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        tsnn.ConvBlock(1, 1, kernel=4)


def test_backprop_linear_and_unused():
    a = torch.nn.Parameter(torch.randn(3, 2))
    b = torch.nn.Parameter(torch.randn(4))
    tsnn.backprop(a.sum(), [("a", a), ("b", b)])
    assert torch.equal(a.grad, torch.ones(3, 2))
    assert torch.equal(b.grad, torch.zeros(4))


def test_backprop_skips_frozen_and_reports_nan_layer():
    a = torch.nn.Parameter(torch.ones(2))
    frozen = torch.nn.Parameter(torch.ones(2), requires_grad=False)
    tsnn.backprop((a * frozen).sum(), [("a", a), ("frozen", frozen)])
    assert frozen.grad is None
    w2 = torch.nn.Parameter(torch.tensor([0.0]))
    with pytest.raises(NonFiniteError, match="layer7.weight"):
        tsnn.backprop(torch.sqrt(w2).sum(), [("layer7.weight", w2)])


def test_adam_zero_gradient_leaves_params():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = tsnn.make_adam([p])
    p.grad = torch.zeros(2)
    tsnn.adam_step(opt)
    assert torch.equal(p.data, torch.tensor([1.0, -2.0]))
    assert opt.state[p]["step"].item() == 1


def test_adam_first_step_closed_form():
    p = torch.nn.Parameter(torch.zeros(3))
    opt = tsnn.make_adam([p], lr=1e-3)
    p.grad = torch.tensor([0.5, -2.0, 10.0])
    tsnn.adam_step(opt)
    assert torch.allclose(p.data, torch.tensor([-1e-3, 1e-3, -1e-3]), rtol=1e-4)
    assert opt.defaults["betas"] == (0.9, 0.999) and opt.defaults["eps"] == 1e-8


def test_adam_descends_quadratic():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    opt = tsnn.make_adam([p], lr=0.05)
    trace = []
    for _ in range(100):
        tsnn.backprop((p ** 2).sum(), [("p", p)])
        tsnn.adam_step(opt)
        trace.append(abs(p.item()))
    assert all(b < a for a, b in zip(trace[:20], trace[1:21]))
    assert trace[-1] < 0.5


def test_max_relative_error_floor():
    assert tsnn.max_relative_error([1e-9], [2e-9]) < 1e-2
    assert tsnn.max_relative_error([1.0], [1.0001]) == pytest.approx(1e-4, rel=1e-3)


@pytest.mark.parametrize("name,loss_fn,tensors", gradcases.layer_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_layer_gradients_match_finite_differences(name, loss_fn, tensors):
    assert tsnn.finite_difference_check(loss_fn, tensors) < 1e-4, name


def test_gradient_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g

    x = torch.randn(5, dtype=torch.float64).requires_grad_()
    assert tsnn.finite_difference_check(lambda: Wrong.apply(x).sum(), [x]) > 1e-2
