"""scikit-learn style estimator for the two-stage localization pipeline.

``fit`` trains the color mapper, the domain-code projector and the localizer
jointly; ``transform`` returns the retouched images; ``predict_proba`` and
``predict`` return per-pixel region probabilities and binary masks.
Images are ``[N, 3, H, W]`` floats in [0, 1], masks ``[N, H, W]`` or
``[N, 1, H, W]`` with values in {0, 1}.
"""
from __future__ import annotations

import ast
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint as ckpt_io
from .colormap import ColorMapConfig, color_map, init_colormap
from .config import parse_key_values
from .diffcore import NumericalError, ParamStore, l2_distance
from .domenc import DomainEncoderConfig, encode_taps, init_domain_encoder, project
from .localizer import get_localizer
from .losses import LossReport, LossWeights, ddm_loss, di_loss, localization_loss, total_loss
from .metrics import MetricsReport, aggregate, image_metrics, pooled_average_precision
from .optim import Adam
from .validation import check_images, check_masks

ESTIMATOR_FILE = "estimator.txt"


@dataclass
class DiscrepancyStats:
    pct_enlarged_by_margin: float
    pct_enlarged: float
    n: int
    n_skipped: int = 0


class InharmonyLocalizer(BaseEstimator):
    """Color-mapping stage followed by a segmentation network.

    With ``color_map=False`` the localizer sees the raw image and the
    domain-code losses are not used (plain segmentation baseline).
    """

    def __init__(self, color_map=True, localizer="unet", unet_width=16,
                 lambda_ddm=0.001, lambda_di=0.001, margin=0.01,
                 learning_rate=1e-4, beta1=0.5, beta2=0.999, batch_size=8, epochs=20,
                 theta=0.7, lowres_size=32, grid_size=8, grid_depth=4,
                 code_dim=16, encoder_seed=0, threshold=0.5, random_state=0):
        self.color_map = color_map
        self.localizer = localizer
        self.unet_width = unet_width
        self.lambda_ddm = lambda_ddm
        self.lambda_di = lambda_di
        self.margin = margin
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.theta = theta
        self.lowres_size = lowres_size
        self.grid_size = grid_size
        self.grid_depth = grid_depth
        self.code_dim = code_dim
        self.encoder_seed = encoder_seed
        self.threshold = threshold
        self.random_state = random_state

    # -- configuration helpers -------------------------------------------

    @property
    def _cm_cfg(self) -> ColorMapConfig:
        return ColorMapConfig(lowres_size=self.lowres_size, grid_size=self.grid_size,
                              grid_depth=self.grid_depth, theta=self.theta)

    @property
    def _enc_cfg(self) -> DomainEncoderConfig:
        return DomainEncoderConfig(code_dim=self.code_dim, seed=self.encoder_seed)

    @property
    def _weights(self) -> LossWeights:
        return LossWeights(self.lambda_ddm, self.lambda_di, self.margin)

    @property
    def _uses_codes(self) -> bool:
        return bool(self.color_map) and (self.lambda_ddm > 0 or self.lambda_di > 0)

    def _multiple(self) -> int:
        return get_localizer(self.localizer).multiple

    def initialize(self) -> "InharmonyLocalizer":
        """Create freshly initialised parameters and optimizer state."""
        self._weights  # validate
        gen = torch.Generator().manual_seed(int(self.random_state))
        store = ParamStore()
        if self.color_map:
            init_colormap(store, self._cm_cfg, gen)
            init_domain_encoder(store, self._enc_cfg)
        if self.localizer == "unet":
            get_localizer("unet").init(store, gen, base_width=self.unet_width)
        else:
            get_localizer(self.localizer).init(store, gen)
        self.params_ = store
        self.optimizer_ = Adam(store, self.learning_rate, (self.beta1, self.beta2))
        self.history_ = []
        return self

    # -- forward pieces --------------------------------------------------

    def _retouch(self, x):
        if not self.color_map:
            return x
        return color_map(x, self.params_.view("colormap."), self._cm_cfg)[0]

    def _logits(self, xr):
        return get_localizer(self.localizer).forward(xr, self.params_.view("localizer."))

    def _frozen(self):
        return self.params_.view("domenc.frozen.")

    def _region_taps(self, x, m):
        """Tap features of the foreground and background of each image, ``[N, 2, C]`` per tap."""
        n = x.shape[0]
        taps = encode_taps(torch.cat([x, x]), torch.cat([m, 1 - m]), self._frozen(), self._enc_cfg)
        return [torch.stack([t[:n], t[n:]], dim=1) for t in taps]

    def _codes(self, taps):
        dom = self.params_.view("domenc.")
        z = project([t.reshape(-1, t.shape[-1]) for t in taps], dom)
        z = z.reshape(-1, 2, z.shape[-1])
        return z[:, 0], z[:, 1]

    def _loss(self, x, m, taps_orig=None) -> LossReport:
        xr = self._retouch(x)
        loc = localization_loss(self._logits(xr), m)
        zero = torch.zeros((), dtype=loc.dtype)
        ddm = di = zero
        if self._uses_codes:
            valid = (m.sum(dim=(1, 2, 3)) > 0) & ((1 - m).sum(dim=(1, 2, 3)) > 0)
            if valid.any():
                if taps_orig is None:
                    with torch.no_grad():
                        taps_orig = self._region_taps(x, m)
                z_f, z_b = self._codes([t[valid] for t in taps_orig])
                zn_f, zn_b = self._codes(self._region_taps(xr[valid], m[valid]))
                ddm = ddm_loss(z_f, z_b, zn_f, zn_b, self.margin)
                di = di_loss(z_f, z_b, zn_f, zn_b)
        return total_loss(ddm, di, loc, self._weights)

    def _precompute_taps(self, X, y, chunk=64):
        out = None
        with torch.no_grad():
            for s in range(0, X.shape[0], chunk):
                taps = self._region_taps(X[s:s + chunk], y[s:s + chunk])
                out = taps if out is None else [torch.cat([a, b]) for a, b in zip(out, taps)]
        return out

    def train_step(self, x, m, taps_orig=None) -> LossReport:
        """One Adam step on a batch; returns the losses measured before the update."""
        self.last_batch_ = (x, m)
        self.params_.zero_grad()
        report = self._loss(x, m, taps_orig)
        if not torch.isfinite(report.total):
            raise NumericalError(f"non-finite loss {report.as_floats()}")
        report.total.backward()
        self.optimizer_.step()
        return report

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y, on_step: Callable[[dict], None] | None = None,
            on_epoch_end: Callable[["InharmonyLocalizer", int], None] | None = None):
        """Train from scratch on images ``X`` and region masks ``y``.

        ``on_step`` receives one dict per optimizer step (step, epoch, ddm,
        di, loc, total); ``on_epoch_end`` is called after every epoch.
        """
        X = check_images(X, self._multiple())
        y = check_masks(y, X)
        if self.color_map and min(X.shape[2:]) < self.lowres_size:
            raise ValueError(f"images must be at least {self.lowres_size} pixels on each side")
        self.initialize()
        self.image_shape_ = tuple(X.shape[1:])
        taps = self._precompute_taps(X, y) if self._uses_codes else None
        order = np.random.default_rng(int(self.random_state))
        n = X.shape[0]
        for epoch in range(int(self.epochs)):
            perm = torch.from_numpy(order.permutation(n))
            for s in range(0, n, self.batch_size):
                idx = perm[s:s + self.batch_size]
                report = self.train_step(X[idx], y[idx], None if taps is None else [t[idx] for t in taps])
                row = {"step": self.optimizer_.step_count, "epoch": epoch, **report.as_floats()}
                if not self._uses_codes:
                    row["ddm"] = row["di"] = math.nan
                self.history_.append(row)
                if on_step is not None:
                    on_step(row)
            if on_epoch_end is not None:
                on_epoch_end(self, epoch)
        return self

    def _batched(self, X, fn, chunk=32):
        outs = []
        with torch.no_grad():
            for s in range(0, X.shape[0], chunk):
                outs.append(fn(X[s:s + chunk]))
        return torch.cat(outs)

    def transform(self, X) -> np.ndarray:
        """Retouched images ``[N, 3, H, W]`` (the input itself when color mapping is off)."""
        check_is_fitted(self, "params_")
        X = check_images(X)
        return self._batched(X, self._retouch).numpy()

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_images(X, self._multiple())
        return self._batched(X, lambda x: self._logits(self._retouch(x)))[:, 0].numpy()

    def predict_proba(self, X) -> np.ndarray:
        """Per-pixel probability of belonging to the inharmonious region, ``[N, H, W]``."""
        return torch.sigmoid(torch.from_numpy(self.decision_function(X))).numpy()

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def evaluate(self, X, y, pooled_ap: bool = False) -> MetricsReport:
        y = check_masks(y, check_images(X)).numpy()[:, 0]
        prob = self.predict_proba(X)
        report = aggregate(image_metrics(p, g, self.threshold) for p, g in zip(prob, y))
        if pooled_ap:
            report.pooled_ap = pooled_average_precision(prob, y)
        return report

    def score(self, X, y) -> float:
        """Mean per-image IoU."""
        return self.evaluate(X, y).iou

    def domain_distances(self, X, y):
        """Per-image code distances ``(d, d')`` before and after color mapping.

        Images whose region or background is empty are dropped; the third
        return value counts them.
        """
        check_is_fitted(self, "params_")
        if not self.color_map:
            raise ValueError("domain distances need the color-mapping stage")
        X = check_images(X)
        y = check_masks(y, X)
        valid = (y.sum(dim=(1, 2, 3)) > 0) & ((1 - y).sum(dim=(1, 2, 3)) > 0)
        X, y = X[valid], y[valid]
        d, d_new = [], []
        with torch.no_grad():
            for s in range(0, X.shape[0], 32):
                x, m = X[s:s + 32], y[s:s + 32]
                z_f, z_b = self._codes(self._region_taps(x, m))
                zn_f, zn_b = self._codes(self._region_taps(self._retouch(x), m))
                d.append(l2_distance(z_f, z_b))
                d_new.append(l2_distance(zn_f, zn_b))
        return torch.cat(d).numpy(), torch.cat(d_new).numpy(), int((~valid).sum())

    def discrepancy_stats(self, X, y) -> DiscrepancyStats:
        d, d_new, skipped = self.domain_distances(X, y)
        n = len(d)
        if n == 0:
            return DiscrepancyStats(math.nan, math.nan, 0, skipped)
        return DiscrepancyStats(
            pct_enlarged_by_margin=100.0 * float(np.mean(d + self.margin < d_new)),
            pct_enlarged=100.0 * float(np.mean(d < d_new)),
            n=n, n_skipped=skipped)

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        path = Path(path)
        moments, step = self.optimizer_.state()
        ckpt_io.save_store(path, self.params_, moments, step)
        lines = [f"{k} = {v!r}" if isinstance(v, str) else f"{k} = {v}"
                 for k, v in sorted(self.get_params().items())]
        (path / ESTIMATOR_FILE).write_text("\n".join(lines) + "\n")

    def load_weights(self, path) -> "InharmonyLocalizer":
        """Initialise the architecture from this estimator's parameters, then load ``path`` strictly."""
        self.initialize()
        ckpt = ckpt_io.load_into(self.params_, path)
        if ckpt.step is not None:
            self.optimizer_.load_state(ckpt.moments, ckpt.step)
        return self

    @classmethod
    def load(cls, path) -> "InharmonyLocalizer":
        path = Path(path)
        try:
            raw = parse_key_values((path / ESTIMATOR_FILE).read_text())
        except OSError as exc:
            raise ckpt_io.CheckpointError(f"no {ESTIMATOR_FILE} in {path}") from exc
        est = cls(**{k: parse_literal(v) for k, v in raw.items()})
        return est.load_weights(path)


def parse_literal(text: str):
    """Python literal in ``text`` if it parses as one, else the text itself."""
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
