"""Learned per-pixel affine color mapping driven by a bilateral grid.

A low-resolution stream (central-difference convolutions followed by
self-attention) predicts a grid of 3x4 affine transforms over
``(depth, y, x)``; a pointwise guidance network picks the depth coordinate
of every full-resolution pixel; trilinear slicing turns the grid into a
per-pixel field that is applied to the image.

Coefficient layout in the 12-channel axis is row-major over the 3x4 matrix
``[K | b]``: ``K00 K01 K02 b0 K10 K11 K12 b1 K20 K21 K22 b2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .diffcore import (ParamStore, attention_block, attention_channels, bilinear_resize,
                       cdc_conv2d, check_finite, conv2d, relu, sigmoid)

IDENTITY_AFFINE = (1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class ColorMapConfig:
    lowres_size: int = 32
    grid_size: int = 8
    grid_depth: int = 4
    theta: float = 0.7
    widths: tuple[int, ...] = (16, 32, 64)
    guide_hidden: int = 16


def _he_normal(shape, gen, dtype=torch.float32):
    fan_in = 1
    for s in shape[1:]:
        fan_in *= s
    return torch.randn(shape, generator=gen, dtype=dtype) * (2.0 / fan_in) ** 0.5


def init_colormap(store: ParamStore, cfg: ColorMapConfig, gen: torch.Generator,
                  prefix: str = "colormap.") -> None:
    """Register color-mapping parameters; the grid head starts as the identity map."""
    h = cfg.guide_hidden
    store.add(prefix + "guide.conv1.w", _he_normal((h, 3, 1, 1), gen))
    store.add(prefix + "guide.conv1.b", torch.zeros(h))
    store.add(prefix + "guide.conv2.w", _he_normal((1, h, 1, 1), gen))
    store.add(prefix + "guide.conv2.b", torch.zeros(1))

    cin = 3
    for i, cout in enumerate(cfg.widths, start=1):
        store.add(prefix + f"grid.cdc{i}.w", _he_normal((cout, cin, 3, 3), gen))
        store.add(prefix + f"grid.cdc{i}.b", torch.zeros(cout))
        cin = cout
    cq = attention_channels(cin)
    store.add(prefix + "grid.attn.wq", torch.randn(cq, cin, generator=gen) / cin ** 0.5)
    store.add(prefix + "grid.attn.bq", torch.zeros(cq))
    store.add(prefix + "grid.attn.wk", torch.randn(cq, cin, generator=gen) / cin ** 0.5)
    store.add(prefix + "grid.attn.wv", torch.randn(cin, cin, generator=gen) / cin ** 0.5)
    store.add(prefix + "grid.attn.bv", torch.zeros(cin))
    store.add(prefix + "grid.attn.gamma", torch.zeros(1))

    d = cfg.grid_depth
    store.add(prefix + "grid.head.w", torch.zeros(12 * d, cin, 1, 1))
    store.add(prefix + "grid.head.b", identity_head_bias(d))


def identity_head_bias(depth: int) -> torch.Tensor:
    # head channel c * depth + z holds coefficient c of depth slice z
    return torch.tensor(IDENTITY_AFFINE).repeat_interleave(depth)


def check_image(image: torch.Tensor) -> None:
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an [N, 3, H, W] image, got {tuple(image.shape)}")
    check_finite(image, "image")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")


def compute_guidance(image, params: Mapping[str, torch.Tensor]):
    """Pointwise 3 -> hidden (ReLU) -> 1 (sigmoid) guidance map in (0, 1)."""
    check_image(image)
    g = relu(conv2d(image, params["guide.conv1.w"], params["guide.conv1.b"]))
    return sigmoid(conv2d(g, params["guide.conv2.w"], params["guide.conv2.b"]))


def predict_grid(image, params: Mapping[str, torch.Tensor], cfg: ColorMapConfig = ColorMapConfig()):
    """Bilateral grid of affine coefficients, shape ``[N, 12, D, Gh, Gw]``."""
    check_image(image)
    n, _, h, w = image.shape
    s = cfg.lowres_size
    if h < s or w < s:
        raise ValueError(f"image {h}x{w} smaller than the low-resolution stream size {s}")
    x = bilinear_resize(image, (s, s))
    for i in range(1, len(cfg.widths) + 1):
        x = relu(cdc_conv2d(x, params[f"grid.cdc{i}.w"], params[f"grid.cdc{i}.b"],
                            stride=2, padding=1, theta=cfg.theta))
    attn = {k: params["grid.attn." + k] for k in ("wq", "bq", "wk", "wv", "bv", "gamma")}
    x = attention_block(x, attn)
    x = bilinear_resize(x, (cfg.grid_size, cfg.grid_size))
    x = conv2d(x, params["grid.head.w"], params["grid.head.b"])
    return x.reshape(n, 12, cfg.grid_depth, cfg.grid_size, cfg.grid_size)


def _axis_taps(coord, size):
    lo = torch.floor(coord)
    frac = coord - lo
    lo = lo.long()
    return lo.clamp(0, size - 1), (lo + 1).clamp(0, size - 1), frac


class SliceGridFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, grid, guide):
        n, c, d, gh, gw = grid.shape
        h, w = guide.shape[2:]
        dt = grid.dtype
        xs = (torch.arange(w, dtype=dt) + 0.5) * gw / w - 0.5
        ys = (torch.arange(h, dtype=dt) + 0.5) * gh / h - 0.5
        x0, x1, fx = _axis_taps(xs, gw)
        y0, y1, fy = _axis_taps(ys, gh)
        z0, z1, fz = _axis_taps(guide.reshape(n, h * w) * d - 0.5, d)

        # planar (y, x) corners, shared by every sample
        yx_idx, yx_w = [], []
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                yx_idx.append((yi[:, None] * gw + xi[None, :]).reshape(-1))
                yx_w.append((wy[:, None] * wx[None, :]).reshape(-1))

        flat = grid.reshape(n, c, d * gh * gw)
        lo = torch.zeros(n, c, h * w, dtype=dt)
        hi = torch.zeros(n, c, h * w, dtype=dt)
        for idx, wt in zip(yx_idx, yx_w):
            lo += wt * torch.gather(flat, 2, (z0 * gh * gw + idx).unsqueeze(1).expand(n, c, -1))
            hi += wt * torch.gather(flat, 2, (z1 * gh * gw + idx).unsqueeze(1).expand(n, c, -1))
        fz = fz.unsqueeze(1)
        out = lo * (1 - fz) + hi * fz
        ctx.save_for_backward(z0, z1, fz, lo, hi)
        ctx.yx = (yx_idx, yx_w)
        ctx.dims = (n, c, d, gh, gw, h, w)
        return out.reshape(n, c, h, w)

    @staticmethod
    def backward(ctx, grad):
        z0, z1, fz, lo, hi = ctx.saved_tensors
        yx_idx, yx_w = ctx.yx
        n, c, d, gh, gw, h, w = ctx.dims
        g = grad.reshape(n, c, h * w)
        ggrid = gguide = None
        if ctx.needs_input_grad[0]:
            acc = torch.zeros(n, c, d * gh * gw, dtype=grad.dtype)
            glo, ghi = g * (1 - fz), g * fz
            for idx, wt in zip(yx_idx, yx_w):
                acc.scatter_add_(2, (z0 * gh * gw + idx).unsqueeze(1).expand(n, c, -1), wt * glo)
                acc.scatter_add_(2, (z1 * gh * gw + idx).unsqueeze(1).expand(n, c, -1), wt * ghi)
            ggrid = acc.reshape(n, c, d, gh, gw)
        if ctx.needs_input_grad[1]:
            # d(out)/d(guide) = d * (hi - lo); zero once both depth taps clamp to one cell
            gguide = (g * (hi - lo)).sum(dim=1) * d
            gguide = gguide.reshape(n, 1, h, w)
        return ggrid, gguide


def slice_grid(grid, guide):
    """Trilinear lookup of per-pixel coefficients, cell-centred and clamped to the edges.

    Pixel ``(x, y)`` with guidance ``g`` samples the grid at
    ``((x + .5) Gw / W - .5, (y + .5) Gh / H - .5, g D - .5)``.
    """
    if grid.dim() != 5 or grid.shape[1] != 12:
        raise ValueError(f"expected a [N, 12, D, Gh, Gw] grid, got {tuple(grid.shape)}")
    if guide.dim() != 4 or guide.shape[1] != 1 or guide.shape[0] != grid.shape[0]:
        raise ValueError(f"guidance shape {tuple(guide.shape)} incompatible with grid")
    return SliceGridFunction.apply(grid, guide)


class ApplyAffineFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, image, field):
        n, _, h, w = image.shape
        a = field.reshape(n, 3, 4, h, w)
        i0, i1, i2 = image[:, 0:1], image[:, 1:2], image[:, 2:3]
        pre = a[:, :, 0] * i0 + a[:, :, 1] * i1 + a[:, :, 2] * i2 + a[:, :, 3]
        inside = (pre >= 0) & (pre <= 1)
        ctx.save_for_backward(image, a, inside)
        return pre.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        image, a, inside = ctx.saved_tensors
        gpre = grad * inside
        gimage = gfield = None
        if ctx.needs_input_grad[0]:
            gimage = torch.einsum("ncjhw,nchw->njhw", a[:, :, :3], gpre)
        if ctx.needs_input_grad[1]:
            n, _, h, w = image.shape
            ga = torch.empty(n, 3, 4, h, w, dtype=grad.dtype)
            ga[:, :, :3] = gpre[:, :, None] * image[:, None]
            ga[:, :, 3] = gpre
            gfield = ga.reshape(n, 12, h, w)
        return gimage, gfield


def apply_affine(image, field):
    """``I'(p) = K(p) I(p) + b(p)``, hard-clamped to [0, 1]."""
    if field.shape != (image.shape[0], 12) + tuple(image.shape[2:]) or image.shape[1] != 3:
        raise ValueError(f"field {tuple(field.shape)} does not match image {tuple(image.shape)}")
    return ApplyAffineFunction.apply(image, field)


def color_map(image, params: Mapping[str, torch.Tensor], cfg: ColorMapConfig = ColorMapConfig()):
    """Return the retouched image and the per-pixel affine field that produced it."""
    grid = predict_grid(image, params, cfg)
    guide = compute_guidance(image, params)
    field = slice_grid(grid, guide)
    return apply_affine(image, field), field
