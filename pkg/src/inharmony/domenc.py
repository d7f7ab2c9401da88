"""Region-restricted domain codes from a frozen partial-convolution extractor.

The extractor mirrors the first three VGG blocks at reduced width and taps
the last convolution of each block. Every convolution is partial, so the
code of ``(image, mask)`` depends only on pixels where ``mask == 1``.
Only the per-tap projectors and the tap-combination weights are trainable;
gradients still flow through the frozen layers into the image.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch

from .diffcore import ParamStore, linear, mask_max_pool2x2, max_pool2x2, partial_conv2d, relu

FROZEN_PREFIX = "domenc.frozen."


@dataclass(frozen=True)
class DomainEncoderConfig:
    widths: tuple[int, int, int] = (16, 32, 64)
    # conv layers per block; the last one of each block is tapped
    depths: tuple[int, int, int] = (2, 2, 3)
    code_dim: int = 16
    seed: int = 0


def layer_names(cfg: DomainEncoderConfig):
    names = []
    cin = 3
    for b, (width, depth) in enumerate(zip(cfg.widths, cfg.depths), start=1):
        for j in range(1, depth + 1):
            names.append((f"conv{b}_{j}", cin, width))
            cin = width
    return names


def init_domain_encoder(store: ParamStore, cfg: DomainEncoderConfig = DomainEncoderConfig()) -> None:
    """Register the frozen extractor (orthogonal init from ``cfg.seed``) and the trainable projector."""
    gen = torch.Generator().manual_seed(cfg.seed)
    for name, cin, cout in layer_names(cfg):
        w = torch.empty(cout, cin * 9)
        torch.nn.init.orthogonal_(w, gain=2 ** 0.5, generator=gen)
        store.add(FROZEN_PREFIX + name + ".w", w.reshape(cout, cin, 3, 3), trainable=False)
        store.add(FROZEN_PREFIX + name + ".b", torch.zeros(cout), trainable=False)
    # projector draws from its own stream so it is independent of the extractor widths
    pgen = torch.Generator().manual_seed(cfg.seed + 1)
    for i, width in enumerate(cfg.widths, start=1):
        bound = 1.0 / width ** 0.5
        store.add(f"domenc.proj.fc{i}.w", (torch.rand(cfg.code_dim, width, generator=pgen) * 2 - 1) * bound)
        store.add(f"domenc.proj.fc{i}.b", (torch.rand(cfg.code_dim, generator=pgen) * 2 - 1) * bound)
    store.add("domenc.proj.tap_weights", torch.full((len(cfg.widths),), 1.0 / len(cfg.widths)))


def masked_gap(feature, mask):
    """Per-channel mean of ``feature`` over ``mask``; zeros when the mask is empty."""
    if mask.shape[0] != feature.shape[0] or mask.shape[1] != 1 or mask.shape[2:] != feature.shape[2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match feature {tuple(feature.shape)}")
    area = mask.sum(dim=(2, 3)).clamp(min=1.0)
    return (feature * mask).sum(dim=(2, 3)) / area


def encode_taps(image, mask, params: Mapping[str, torch.Tensor],
                cfg: DomainEncoderConfig = DomainEncoderConfig()) -> list[torch.Tensor]:
    """Masked-average-pooled features of every tap, each ``[N, C_tap]``."""
    if image.dim() != 4 or image.shape[1] != 3:
        raise ValueError(f"expected an [N, 3, H, W] image, got {tuple(image.shape)}")
    x, m = image, mask.to(image.dtype)
    taps = []
    for b, depth in enumerate(cfg.depths, start=1):
        if b > 1:
            x, m = max_pool2x2(x), mask_max_pool2x2(m)
        for j in range(1, depth + 1):
            pre = f"conv{b}_{j}."
            x, m = partial_conv2d(x, m, params[pre + "w"], params[pre + "b"], stride=1, padding=1)
            x = relu(x)
        taps.append(masked_gap(x, m))
    return taps


def project(taps, params: Mapping[str, torch.Tensor]):
    """``z = sum_i w_i * FC_i(tap_i)``."""
    w = params["proj.tap_weights"]
    z = None
    for i, t in enumerate(taps):
        zi = linear(t, params[f"proj.fc{i + 1}.w"], params[f"proj.fc{i + 1}.b"])
        z = w[i] * zi if z is None else z + w[i] * zi
    return z


def extract_code(image, mask, params: Mapping[str, torch.Tensor],
                 cfg: DomainEncoderConfig = DomainEncoderConfig()):
    """Domain-aware code ``[N, code_dim]`` of the region selected by ``mask``.

    ``params`` is a view rooted at ``domenc.`` (holding ``frozen.*`` and ``proj.*``).
    """
    frozen = {k[len("frozen."):]: v for k, v in params.items() if k.startswith("frozen.")}
    return project(encode_taps(image, mask, frozen, cfg), params)
