"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np
import torch


def check_images(X, multiple: int = 1) -> torch.Tensor:
    """Return ``X`` as a float32 ``[N, 3, H, W]`` tensor with values in [0, 1]."""
    arr = X.detach().cpu().numpy() if isinstance(X, torch.Tensor) else np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected images shaped [N, 3, H, W], got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("no images given")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"expected floating-point images in [0, 1], got dtype {arr.dtype}")
    if not np.isfinite(arr).all():
        raise ValueError("images contain NaN or Inf")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    h, w = arr.shape[2:]
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))


def check_masks(y, images: torch.Tensor) -> torch.Tensor:
    """Return ``y`` as a float32 ``[N, 1, H, W]`` binary tensor matching ``images``."""
    arr = y.detach().cpu().numpy() if isinstance(y, torch.Tensor) else np.asarray(y)
    n, _, h, w = images.shape
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape != (n, 1, h, w):
        raise ValueError(f"masks shaped {arr.shape} do not match images {tuple(images.shape)}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
