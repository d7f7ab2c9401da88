"""Finite-difference checks for every differentiable operation, at small shapes.

Each case builds ``(fn, inputs)`` from a seeded generator; sample points
are drawn away from kinks (clamp edges, ReLU zeros, hinge points, pooling
ties) so central differences are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from . import colormap as cm
from . import diffcore as dc
from . import domenc, losses
from .localizer import init_unet, unet_forward

f64 = torch.float64


def _randn(gen, *shape, scale=1.0):
    return torch.randn(*shape, generator=gen, dtype=f64) * scale


def _rand(gen, *shape, lo=0.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=f64)


def _away_from_zero(x, gap=0.05):
    return torch.where(x.abs() < gap, x.sign() * gap + x, x)


def _conv(gen):
    return dc.conv2d, [_randn(gen, 1, 2, 4, 4), _randn(gen, 3, 2, 3, 3), _randn(gen, 3), 1, 1]


def _conv_strided(gen):
    return dc.conv2d, [_randn(gen, 2, 2, 5, 5), _randn(gen, 2, 2, 3, 3), _randn(gen, 2), 2, 1]


def _cdc(gen):
    def fn(x, w, b):
        return dc.cdc_conv2d(x, w, b, stride=2, padding=1, theta=0.7)
    return fn, [_randn(gen, 1, 2, 5, 5), _randn(gen, 3, 2, 3, 3), _randn(gen, 3)]


def _pconv(gen):
    mask = (torch.rand(1, 1, 5, 5, generator=gen) > 0.4).to(f64)
    mask[0, 0, 2, 2] = 1

    def fn(x, w, b):
        return dc.partial_conv2d(x, mask, w, b, stride=1, padding=1)[0]
    return fn, [_randn(gen, 1, 2, 5, 5), _randn(gen, 3, 2, 3, 3), _randn(gen, 3)]


def _attention(gen):
    names = ("wq", "bq", "wk", "wv", "bv", "gamma")

    def fn(x, *vals):
        return dc.attention_block(x, dict(zip(names, vals)))
    c = 8
    return fn, [_randn(gen, 1, c, 3, 3), _randn(gen, 1, c, scale=0.5), _randn(gen, 1),
                _randn(gen, 1, c, scale=0.5), _randn(gen, c, c, scale=0.5), _randn(gen, c),
                torch.tensor([0.7], dtype=f64)]


def _slice(gen):
    grid = _randn(gen, 1, 12, 4, 3, 3)
    # keep the guidance inside the interpolated range (the clamped edge bands have an
    # exactly-zero gradient, which only measures round-off) and away from depth-cell
    # centres, where the interpolation has kinks
    z = _rand(gen, 1, 1, 4, 5, lo=0.15, hi=0.82)
    pos = z * 4 - 0.5
    z = torch.where((pos - pos.round()).abs() < 0.05, z + 0.03, z)
    return cm.slice_grid, [grid, z]


def _affine(gen):
    image = _rand(gen, 1, 3, 3, 3, lo=0.2, hi=0.8)
    field = torch.tensor(cm.IDENTITY_AFFINE, dtype=f64).view(1, 12, 1, 1).repeat(1, 1, 3, 3)
    field = field + _randn(gen, 1, 12, 3, 3, scale=0.02)
    return cm.apply_affine, [image, field]


def _relu(gen):
    return dc.relu, [_away_from_zero(_randn(gen, 2, 3, 3, 3))]


def _sigmoid(gen):
    return dc.sigmoid, [_randn(gen, 2, 3, 3, 3)]


def _maxpool(gen):
    # distinct values spaced well beyond epsilon: no ties inside a window
    x = torch.randperm(2 * 2 * 4 * 4, generator=gen).to(f64).view(2, 2, 4, 4) * 0.1
    return dc.max_pool2x2, [x]


def _gap(gen):
    return dc.global_avg_pool, [_randn(gen, 2, 3, 4, 4)]


def _linear(gen):
    return dc.linear, [_randn(gen, 4, 5), _randn(gen, 3, 5), _randn(gen, 3)]


def _l2(gen):
    return dc.l2_distance, [_randn(gen, 4, 6), _randn(gen, 4, 6)]


def _cos(gen):
    return dc.cosine_similarity, [_randn(gen, 4, 6), _randn(gen, 4, 6)]


def _bilinear_down(gen):
    return (lambda x: dc.bilinear_resize(x, (3, 3))), [_randn(gen, 1, 2, 6, 6)]


def _bilinear_up(gen):
    return (lambda x: dc.bilinear_resize(x, (6, 5))), [_randn(gen, 1, 2, 3, 3)]


def _masked_gap(gen):
    mask = (torch.rand(2, 1, 4, 4, generator=gen) > 0.5).to(f64)
    mask[:, 0, 0, 0] = 1
    return (lambda f: domenc.masked_gap(f, mask)), [_randn(gen, 2, 3, 4, 4)]


def _codes(gen):
    return [_randn(gen, 3, 5) for _ in range(4)]


def _ddm(gen):
    z = _codes(gen)
    # redraw until no sample sits near the hinge
    while True:
        gap = dc.l2_distance(z[0], z[1]) - dc.l2_distance(z[2], z[3]) + 0.01
        if (gap.abs() > 0.05).all():
            break
        z = _codes(gen)
    return (lambda a, b, c, d: losses.ddm_loss(a, b, c, d, 0.01)), z


def _di(gen):
    return losses.di_loss, _codes(gen)


def _loc(gen):
    gt = (torch.rand(2, 1, 4, 4, generator=gen) > 0.5).to(f64)
    return (lambda logits: losses.localization_loss(logits, gt)), [_randn(gen, 2, 1, 4, 4)]


def _unet(gen):
    store = dc.ParamStore()
    init_unet(store, torch.Generator().manual_seed(int(torch.randint(1 << 30, (1,), generator=gen))),
              base_width=2, depth=1)
    names = [n for n in store.names()]
    prefix = len("localizer.")

    def fn(x, *vals):
        return unet_forward(x, {n[prefix:]: v for n, v in zip(names, vals)})
    vals = [store[n].to(f64) + _randn(gen, *store[n].shape, scale=0.1) for n in names]
    return fn, [_rand(gen, 1, 3, 4, 4)] + vals


def _domain_code(gen):
    cfg = domenc.DomainEncoderConfig(widths=(2, 3, 4), depths=(1, 1, 1), code_dim=3, seed=0)
    store = dc.ParamStore()
    domenc.init_domain_encoder(store, cfg)
    mask = torch.zeros(1, 1, 8, 8, dtype=f64)
    mask[..., 1:6, 2:7] = 1
    names = store.names()
    prefix = len("domenc.")

    def fn(x, *vals):
        params = {n[prefix:]: v for n, v in zip(names, vals)}
        return domenc.extract_code(x, mask, params, cfg)
    vals = [store[n].to(f64) for n in names]
    return fn, [_rand(gen, 1, 3, 8, 8)] + vals


def _color_map(gen):
    cfg = cm.ColorMapConfig(lowres_size=8, grid_size=2, grid_depth=2, widths=(4, 4, 8), guide_hidden=4)
    store = dc.ParamStore()
    cm.init_colormap(store, cfg, torch.Generator().manual_seed(0))
    names = store.names()
    prefix = len("colormap.")
    vals = [store[n].to(f64) for n in names]
    # random head and non-zero attention gate so every parameter influences the output
    for i, n in enumerate(names):
        if n.endswith("grid.head.w"):
            vals[i] = _randn(gen, *vals[i].shape, scale=0.01)
        if n.endswith("gamma"):
            vals[i] = torch.tensor([0.5], dtype=f64)

    def fn(x, *vals):
        return cm.color_map(x, {n[prefix:]: v for n, v in zip(names, vals)}, cfg)[0]
    return fn, [_rand(gen, 1, 3, 8, 8, lo=0.3, hi=0.7)] + vals


CASES: dict[str, Callable[[torch.Generator], tuple]] = {
    "conv2d": _conv,
    "conv2d_strided": _conv_strided,
    "cdc_conv2d": _cdc,
    "partial_conv2d": _pconv,
    "attention_block": _attention,
    "slice_grid": _slice,
    "apply_affine": _affine,
    "relu": _relu,
    "sigmoid": _sigmoid,
    "max_pool2x2": _maxpool,
    "global_avg_pool": _gap,
    "linear": _linear,
    "l2_distance": _l2,
    "cosine_similarity": _cos,
    "bilinear_down": _bilinear_down,
    "bilinear_up": _bilinear_up,
    "masked_gap": _masked_gap,
    "ddm_loss": _ddm,
    "di_loss": _di,
    "localization_loss": _loc,
    "unet": _unet,
    "domain_code": _domain_code,
    "color_map": _color_map,
}


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_err: float
    passed: bool


def run_case(name: str, seed: int, tol: float = 1e-4, max_elements: int | None = 40) -> CaseResult:
    fn, inputs = CASES[name](torch.Generator().manual_seed(seed))
    wrt = [i for i, t in enumerate(inputs) if torch.is_tensor(t) and torch.is_floating_point(t)]
    report = dc.grad_check(fn, inputs, wrt=wrt, max_elements=max_elements, seed=seed)
    return CaseResult(name, seed, report.max_rel_err, report.passed(tol))


class _DoubledWeightGrad(dc.Conv2dFunction):
    """Convolution whose backward scales the weight gradient by two."""

    @staticmethod
    def backward(ctx, grad):
        gx, gw, gb, *rest = dc.Conv2dFunction.backward(ctx, grad)
        return (gx, None if gw is None else 2 * gw, gb, *rest)


def planted_fault(seed: int = 0) -> float:
    """Max relative error of the corrupted convolution; a sound checker reports about 0.5."""
    gen = torch.Generator().manual_seed(seed)
    x, w, b = _randn(gen, 1, 2, 4, 4), _randn(gen, 3, 2, 3, 3), _randn(gen, 3)
    fn = lambda x, w, b: _DoubledWeightGrad.apply(x, w, b, 1, 1)  # noqa: E731
    return dc.grad_check(fn, [x, w, b]).max_rel_err
