"""Region localization networks: a compact UNet and a 1x1 stub.

Both expose the same two-function interface, ``init(store, gen)`` and
``forward(image, params) -> logits``, which is all the training harness
relies on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch

from .diffcore import ParamStore, bilinear_resize, conv2d, max_pool2x2, relu


def _he_normal(shape, gen):
    fan_in = shape[1] * shape[2] * shape[3]
    return torch.randn(shape, generator=gen) * (2.0 / fan_in) ** 0.5


def _add_conv(store, name, cin, cout, k, gen):
    store.add(name + ".w", _he_normal((cout, cin, k, k), gen))
    store.add(name + ".b", torch.zeros(cout))


def unet_widths(base: int, depth: int) -> list[int]:
    return [base * 2 ** i for i in range(depth + 1)]


def init_unet(store: ParamStore, gen: torch.Generator, base_width: int = 16, depth: int = 4,
              prefix: str = "localizer.") -> None:
    widths = unet_widths(base_width, depth)
    cin = 3
    for i, w in enumerate(widths[:-1]):
        _add_conv(store, f"{prefix}enc{i}.conv1", cin, w, 3, gen)
        _add_conv(store, f"{prefix}enc{i}.conv2", w, w, 3, gen)
        cin = w
    _add_conv(store, f"{prefix}bottleneck.conv1", cin, widths[-1], 3, gen)
    _add_conv(store, f"{prefix}bottleneck.conv2", widths[-1], widths[-1], 3, gen)
    cin = widths[-1]
    for i in reversed(range(depth)):
        w = widths[i]
        _add_conv(store, f"{prefix}dec{i}.conv1", cin + w, w, 3, gen)
        _add_conv(store, f"{prefix}dec{i}.conv2", w, w, 3, gen)
        cin = w
    _add_conv(store, f"{prefix}head", cin, 1, 1, gen)


def _double_conv(x, params, name):
    x = relu(conv2d(x, params[name + ".conv1.w"], params[name + ".conv1.b"], padding=1))
    return relu(conv2d(x, params[name + ".conv2.w"], params[name + ".conv2.b"], padding=1))


def unet_depth(params: Mapping[str, torch.Tensor]) -> int:
    return sum(1 for k in params if k.startswith("enc") and k.endswith(".conv1.w"))


def unet_forward(image, params: Mapping[str, torch.Tensor]):
    """Encoder-decoder with skip connections; logits have the input's spatial size."""
    depth = unet_depth(params)
    h, w = image.shape[2:]
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"image size {h}x{w} must be divisible by {2 ** depth}")
    skips = []
    x = image
    for i in range(depth):
        x = _double_conv(x, params, f"enc{i}")
        skips.append(x)
        x = max_pool2x2(x)
    x = _double_conv(x, params, "bottleneck")
    for i in reversed(range(depth)):
        skip = skips[i]
        x = bilinear_resize(x, skip.shape[2:])
        x = _double_conv(torch.cat([x, skip], dim=1), params, f"dec{i}")
    return conv2d(x, params["head.w"], params["head.b"])


def init_stub(store: ParamStore, gen: torch.Generator, prefix: str = "localizer.") -> None:
    _add_conv(store, prefix + "head", 3, 1, 1, gen)


def stub_forward(image, params: Mapping[str, torch.Tensor]):
    return conv2d(image, params["head.w"], params["head.b"])


@dataclass(frozen=True)
class Localizer:
    name: str
    init: Callable[[ParamStore, torch.Generator], None]
    forward: Callable[[torch.Tensor, Mapping[str, torch.Tensor]], torch.Tensor]
    multiple: int


LOCALIZERS = {
    "unet": Localizer("unet", init_unet, unet_forward, 16),
    "stub": Localizer("stub", init_stub, stub_forward, 1),
}


def get_localizer(name: str) -> Localizer:
    try:
        return LOCALIZERS[name]
    except KeyError:
        raise ValueError(f"unknown localizer {name!r}; choose from {sorted(LOCALIZERS)}") from None
