"""Differentiable building blocks with hand-written backward passes.

The convolution-family ops and self-attention are ``torch.autograd.Function``
subclasses so their gradients are ours, not autograd's, and can be verified
against central finite differences with :func:`grad_check`. Cheap pointwise
primitives (ReLU, sigmoid, pooling, resizing) use torch's own kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch.nn.grad import conv2d_input, conv2d_weight


class NumericalError(RuntimeError):
    """Raised when a tensor that must be finite holds NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "input") -> None:
    if not torch.isfinite(x).all():
        raise NumericalError(f"{what} contains non-finite values")


def _check_conv_args(x, weight, bias, stride, padding):
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"expected 4-d input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    k = weight.shape[2]
    if weight.shape[3] != k or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {tuple(weight.shape[2:])}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValueError("kernel larger than padded input")
    check_finite(x)


# ---------------------------------------------------------------------------
# convolution family


class Conv2dFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding):
        ctx.save_for_backward(x, weight)
        ctx.stride, ctx.padding = stride, padding
        ctx.has_bias = bias is not None
        return F.conv2d(x, weight, bias, stride=stride, padding=padding)

    @staticmethod
    def backward(ctx, grad):
        x, weight = ctx.saved_tensors
        gx = gw = gb = None
        if ctx.needs_input_grad[0]:
            gx = conv2d_input(x.shape, weight, grad, stride=ctx.stride, padding=ctx.padding)
        if ctx.needs_input_grad[1]:
            gw = conv2d_weight(x, weight.shape, grad, stride=ctx.stride, padding=ctx.padding)
        if ctx.has_bias and ctx.needs_input_grad[2]:
            gb = grad.sum(dim=(0, 2, 3))
        return gx, gw, gb, None, None


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded cross-correlation, ``H' = (H + 2p - k) // s + 1``."""
    _check_conv_args(x, weight, bias, stride, padding)
    return Conv2dFunction.apply(x, weight, bias, stride, padding)


def _center_samples(x, k, stride, padding, out_hw):
    # input pixel under the centre tap of every output window
    xp = F.pad(x, (padding,) * 4)
    c = k // 2
    ho, wo = out_hw
    return xp[:, :, c: c + stride * (ho - 1) + 1: stride, c: c + stride * (wo - 1) + 1: stride]


class CDCConv2dFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias, stride, padding, theta):
        k = weight.shape[2]
        out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
        xc = _center_samples(x, k, stride, padding, out.shape[2:])
        wsum = weight.sum(dim=(2, 3))
        center = torch.einsum("oi,nihw->nohw", wsum, xc)
        ctx.save_for_backward(x, weight, xc, wsum)
        ctx.stride, ctx.padding, ctx.theta = stride, padding, theta
        ctx.has_bias = bias is not None
        return out - theta * center

    @staticmethod
    def backward(ctx, grad):
        x, weight, xc, wsum = ctx.saved_tensors
        s, p, theta = ctx.stride, ctx.padding, ctx.theta
        k = weight.shape[2]
        gx = gw = gb = None
        if ctx.needs_input_grad[0]:
            gx = conv2d_input(x.shape, weight, grad, stride=s, padding=p)
            gxc = torch.einsum("oi,nohw->nihw", wsum, grad)
            gxp = torch.zeros(x.shape[0], x.shape[1], x.shape[2] + 2 * p, x.shape[3] + 2 * p,
                              dtype=x.dtype)
            ho, wo = grad.shape[2:]
            c = k // 2
            gxp[:, :, c: c + s * (ho - 1) + 1: s, c: c + s * (wo - 1) + 1: s] = gxc
            gx = gx - theta * gxp[:, :, p: p + x.shape[2], p: p + x.shape[3]]
        if ctx.needs_input_grad[1]:
            gw = conv2d_weight(x, weight.shape, grad, stride=s, padding=p)
            gcenter = torch.einsum("nohw,nihw->oi", grad, xc)
            gw = gw - theta * gcenter[:, :, None, None]
        if ctx.has_bias and ctx.needs_input_grad[2]:
            gb = grad.sum(dim=(0, 2, 3))
        return gx, gw, gb, None, None, None


def cdc_conv2d(x, weight, bias=None, stride=1, padding=0, theta=0.7):
    """Central difference convolution.

    Blends the vanilla response with the response to local differences
    ``x(p0 + pn) - x(p0)``::

        y = theta * sum w(pn) (x(p0+pn) - x(p0)) + (1 - theta) * sum w(pn) x(p0+pn)
          = conv(x, w) - theta * x(p0) * sum(w)
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    _check_conv_args(x, weight, bias, stride, padding)
    return CDCConv2dFunction.apply(x, weight, bias, stride, padding, float(theta))


class PartialConv2dFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mask, weight, bias, stride, padding):
        k = weight.shape[2]
        ones = torch.ones(1, 1, k, k, dtype=x.dtype)
        visible = F.conv2d(mask, ones, stride=stride, padding=padding)
        updated = (visible > 0).to(x.dtype)
        ratio = (k * k) / visible.clamp(min=1.0) * updated
        xm = x * mask
        raw = F.conv2d(xm, weight, None, stride=stride, padding=padding)
        out = raw * ratio
        if bias is not None:
            out = out + bias.view(1, -1, 1, 1)
        out = out * updated
        ctx.save_for_backward(xm, mask, weight, ratio, updated)
        ctx.stride, ctx.padding = stride, padding
        ctx.has_bias = bias is not None
        ctx.mark_non_differentiable(updated)
        return out, updated

    @staticmethod
    def backward(ctx, grad, _grad_mask):
        xm, mask, weight, ratio, updated = ctx.saved_tensors
        s, p = ctx.stride, ctx.padding
        graw = grad * ratio
        gx = gw = gb = None
        if ctx.needs_input_grad[0]:
            gx = conv2d_input(xm.shape, weight, graw, stride=s, padding=p) * mask
        if ctx.needs_input_grad[2]:
            gw = conv2d_weight(xm, weight.shape, graw, stride=s, padding=p)
        if ctx.has_bias and ctx.needs_input_grad[3]:
            gb = (grad * updated).sum(dim=(0, 2, 3))
        return gx, None, gw, gb, None, None


def partial_conv2d(x, mask, weight, bias=None, stride=1, padding=0):
    """Masked convolution with visible-fraction renormalisation.

    Returns ``(output, updated_mask)``. Pixels where ``mask == 0`` never
    influence the output, and no gradient flows through the mask.
    """
    _check_conv_args(x, weight, bias, stride, padding)
    if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[0] != x.shape[0] or mask.shape[2:] != x.shape[2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} incompatible with input {tuple(x.shape)}")
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask must be binary")
    return PartialConv2dFunction.apply(x, mask.to(x.dtype), weight, bias, stride, padding)


# ---------------------------------------------------------------------------
# self-attention


class AttentionFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, wq, bq, wk, wv, bv, gamma):
        n, c, h, w = x.shape
        xf = x.reshape(n, c, h * w)
        q = torch.einsum("dc,ncp->ndp", wq, xf) + bq.view(1, -1, 1)
        # a key bias would add a per-query constant that the softmax cancels
        k = torch.einsum("dc,ncp->ndp", wk, xf)
        v = torch.einsum("dc,ncp->ndp", wv, xf) + bv.view(1, -1, 1)
        scale = 1.0 / math.sqrt(wq.shape[0])
        # rows index queries, columns index keys
        attn = torch.softmax(torch.einsum("ndi,ndj->nij", q, k) * scale, dim=-1)
        xa = torch.einsum("ncj,nij->nci", v, attn)
        ctx.save_for_backward(xf, q, k, v, attn, xa, wq, wk, wv, gamma)
        ctx.scale = scale
        return (xf + gamma * xa).reshape(n, c, h, w)

    @staticmethod
    def backward(ctx, grad):
        xf, q, k, v, attn, xa, wq, wk, wv, gamma = ctx.saved_tensors
        n, c, h, w = grad.shape
        g = grad.reshape(n, c, h * w)
        ggamma = (g * xa).sum().reshape(gamma.shape)
        gxa = gamma * g
        gv = torch.einsum("nci,nij->ncj", gxa, attn)
        gattn = torch.einsum("nci,ncj->nij", gxa, v)
        gs = attn * (gattn - (gattn * attn).sum(dim=-1, keepdim=True)) * ctx.scale
        gq = torch.einsum("nij,ndj->ndi", gs, k)
        gk = torch.einsum("nij,ndi->ndj", gs, q)
        gwq = torch.einsum("ndp,ncp->dc", gq, xf)
        gwk = torch.einsum("ndp,ncp->dc", gk, xf)
        gwv = torch.einsum("ndp,ncp->dc", gv, xf)
        gx = (g + torch.einsum("dc,ndp->ncp", wq, gq) + torch.einsum("dc,ndp->ncp", wk, gk)
              + torch.einsum("dc,ndp->ncp", wv, gv))
        return gx.reshape(n, c, h, w), gwq, gq.sum(dim=(0, 2)), gwk, gwv, gv.sum(dim=(0, 2)), ggamma


def attention_channels(c: int) -> int:
    return max(1, c // 8)


def attention_block(x, params: Mapping[str, torch.Tensor]):
    """Residual self-attention ``Y = X + gamma * softmax(Q K^T / sqrt(C')) V``.

    ``params`` holds ``wq``/``wk`` of shape ``[C', C]``, ``wv`` of shape
    ``[C, C]``, the biases ``bq``/``bv`` and a one-element ``gamma``.
    """
    if x.dim() != 4:
        raise ValueError(f"expected 4-d input, got {tuple(x.shape)}")
    check_finite(x)
    return AttentionFunction.apply(x, params["wq"], params["bq"], params["wk"],
                                   params["wv"], params["bv"], params["gamma"])


# ---------------------------------------------------------------------------
# primitives backed by torch kernels

relu = torch.relu
sigmoid = torch.sigmoid


def max_pool2x2(x):
    return F.max_pool2d(x, 2)


def mask_max_pool2x2(mask):
    """A coarse cell is visible if any of its four pixels is."""
    with torch.no_grad():
        return F.max_pool2d(mask, 2)


def global_avg_pool(x):
    return x.mean(dim=(2, 3))


def linear(x, weight, bias=None):
    return F.linear(x, weight, bias)


def l2_distance(a, b):
    return torch.linalg.vector_norm(a - b, dim=-1)


def cosine_similarity(a, b, eps: float = 1e-8):
    na = torch.linalg.vector_norm(a, dim=-1).clamp(min=eps)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp(min=eps)
    return (a * b).sum(dim=-1) / (na * nb)


def bilinear_resize(x, size):
    if tuple(x.shape[2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named tensors with per-entry trainable flags.

    Iteration is in lexicographic name order so that optimiser state and
    checkpoints are laid out deterministically. Frozen entries are stored
    with ``requires_grad=False``: gradients still pass *through* them to the
    inputs of the ops that use them.
    """

    def __init__(self):
        self._tensors: dict[str, torch.Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: torch.Tensor, trainable: bool = True) -> torch.Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value.detach().clone().requires_grad_(trainable)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self):
        return [(n, self._tensors[n]) for n in self.names()]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self.items() if self._trainable[n]]

    def frozen(self) -> list[tuple[str, torch.Tensor]]:
        return [(n, t) for n, t in self.items() if not self._trainable[n]]

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self, prefix)

    def assign(self, name: str, value: torch.Tensor) -> None:
        """Overwrite an entry in place, keeping its shape and flags."""
        t = self._tensors[name]
        if tuple(value.shape) != tuple(t.shape):
            raise ValueError(f"{name}: shape {tuple(value.shape)} != {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(value)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def to(self, dtype: torch.dtype) -> "ParamStore":
        other = ParamStore()
        for n, t in self.items():
            other.add(n, t.to(dtype), self._trainable[n])
        return other

    def clone(self) -> "ParamStore":
        other = ParamStore()
        for n, t in self.items():
            other.add(n, t, self._trainable[n])
        return other


class ParamView(Mapping[str, torch.Tensor]):
    """Read-only window onto the entries of a store below ``prefix``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix if prefix.endswith(".") or not prefix else prefix + "."

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.store[self.prefix + key]

    def __iter__(self):
        n = len(self.prefix)
        return (name[n:] for name in self.store.names() if name.startswith(self.prefix))

    def __len__(self) -> int:
        return sum(1 for _ in self)

    def view(self, prefix: str) -> "ParamView":
        return ParamView(self.store, self.prefix + prefix)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)
    nonfinite: bool = False

    def passed(self, tol: float = 1e-4) -> bool:
        return not self.nonfinite and self.max_rel_err <= tol


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, 1e-8))
    return (a - b).abs() / denom


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               epsilon: float = 1e-4, wrt: Sequence[int] | None = None,
               max_elements: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of ``fn(*inputs).sum()`` with central differences.

    All inputs are promoted to float64 copies. ``wrt`` selects which inputs
    are checked (default: every floating-point tensor); ``max_elements``
    limits each checked input to a random subset of coordinates.
    Non-finite gradients are reported rather than raised.
    """
    def _is_float(t):
        return torch.is_tensor(t) and torch.is_floating_point(t)

    xs = [t.detach().to(torch.float64).clone() if _is_float(t) else t for t in inputs]
    if wrt is None:
        wrt = [i for i, t in enumerate(xs) if _is_float(t)]
    for i in wrt:
        xs[i].requires_grad_(True)

    def scalar(*args):
        out = fn(*args)
        if isinstance(out, (tuple, list)):
            out = out[0]
        return out.sum()

    y = scalar(*xs)
    analytic = torch.autograd.grad(y, [xs[i] for i in wrt], allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    report = GradCheckReport(max_rel_err=0.0)
    with torch.no_grad():
        for slot, i in enumerate(wrt):
            x = xs[i]
            a = analytic[slot]
            a = torch.zeros_like(x) if a is None else a
            if not torch.isfinite(a).all():
                report.nonfinite = True
            flat = x.view(-1)
            n = flat.numel()
            if max_elements is not None and n > max_elements:
                idx = torch.randperm(n, generator=gen)[:max_elements]
            else:
                idx = torch.arange(n)
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, e in enumerate(idx.tolist()):
                orig = flat[e].item()
                flat[e] = orig + epsilon
                fp = scalar(*xs).item()
                flat[e] = orig - epsilon
                fm = scalar(*xs).item()
                flat[e] = orig
                numeric[j] = (fp - fm) / (2 * epsilon)
            if not torch.isfinite(numeric).all():
                report.nonfinite = True
            err = _rel_err(a.reshape(-1)[idx], numeric)
            worst = float(err.max()) if len(err) else 0.0
            if math.isnan(worst):
                report.nonfinite = True
            report.per_input.append(worst)
            report.max_rel_err = max(report.max_rel_err, worst)
    return report
