"""SSIM loss, voxel MSE, and the combined training objective.

SSIM uses a separable Gaussian window slid over valid positions only (no
padding), with stabilizers C1 = (k1 L)^2 and C2 = (k2 L)^2. Unless a fixed
data range is configured, L is the ground-truth volume's max - min, treated
as a constant under differentiation.

The combined objective is voxel MSE + (1 - SSIM) + weight * feature loss,
where the feature term dispatches on perc_mode and the cyclic mode follows
the plane schedule at the given epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    conv2d,
    conv3d,
    div,
    mean_all,
    mul,
    reshape,
    scalar_mul,
    square,
    sub,
)
from .percloss import (
    PercConfig,
    PlaneSchedule,
    _as_volume_tensor,
    _ground_truth_tensor,
    cyclic_25d,
    perc_2d,
    perc_3d,
    perc_25d,
)

PERC_MODES = ("cyclic25d", "d2", "d3", "d25", "none")


class WindowTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    """Gaussian-window SSIM parameters.

    data_range None means "ground-truth max minus min"; a float fixes L.
    window_size is clamped per call to the largest odd value fitting the
    smallest image dimension.
    """

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError("window_size must be odd and >= 3")
        if self.sigma <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("sigma, k1, k2 must be positive")


def _gauss_1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _fitted_window(cfg: SsimConfig, dims) -> int:
    smallest = min(dims)
    size = min(cfg.window_size, smallest if smallest % 2 else smallest - 1)
    if size < 3:
        raise WindowTooLarge(f"no odd window >= 3 fits dims {tuple(dims)}")
    return size


def _gauss_filter(t: Tensor, g: np.ndarray) -> Tensor:
    """Separable valid-mode Gaussian filtering of (1, ...) over each spatial
    axis; mathematically the full outer-product window."""
    nd = t.values.ndim - 1
    conv = conv2d if nd == 2 else conv3d
    size = g.size
    for axis in range(nd):
        kshape = [1] * nd
        kshape[axis] = size
        kernel = Tensor(g.reshape(kshape)[None, None].astype(t.dtype))
        t = conv(t, kernel, padding="valid")
    return t


def _ssim_pair(x: Tensor, yt: Tensor, cfg: SsimConfig, data_range: float) -> Tensor:
    """Mean valid-window SSIM between two equally shaped (1, ...) tensors."""
    if data_range <= 0:
        raise ValueError("SSIM needs a positive data range")
    size = _fitted_window(cfg, x.shape[1:])
    g = _gauss_1d(size, cfg.sigma)
    c1 = (cfg.k1 * data_range) ** 2
    c2 = (cfg.k2 * data_range) ** 2
    mu1 = _gauss_filter(x, g)
    mu2 = _gauss_filter(yt, g)
    mu1_sq = square(mu1)
    mu2_sq = square(mu2)
    mu12 = mul(mu1, mu2)
    var1 = sub(_gauss_filter(square(x), g), mu1_sq)
    var2 = sub(_gauss_filter(square(yt), g), mu2_sq)
    cov = sub(_gauss_filter(mul(x, yt), g), mu12)
    numer = mul(add(scalar_mul(mu12, 2.0), c1), add(scalar_mul(cov, 2.0), c2))
    denom = mul(add(add(mu1_sq, mu2_sq), c1), add(add(var1, var2), c2))
    return mean_all(div(numer, denom))


def _resolve_range(cfg: SsimConfig, truth_values: np.ndarray) -> float:
    if cfg.data_range is not None:
        return float(cfg.data_range)
    return float(truth_values.max() - truth_values.min())


def ssim(yhat: Tensor, y, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Mean local SSIM between a predicted volume and the ground truth."""
    pred = _as_volume_tensor(yhat)
    truth = _ground_truth_tensor(y, pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {truth.shape}")
    x = reshape(pred, (1,) + pred.shape)
    yt = reshape(truth, (1,) + truth.shape)
    return _ssim_pair(x, yt, cfg, _resolve_range(cfg, truth.values))


def ssim2d(yhat_slice: Tensor, y_slice, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Mean local SSIM between two 2-D slices (used by plane-wise metrics)."""
    pred = yhat_slice if isinstance(yhat_slice, Tensor) else Tensor(np.asarray(yhat_slice))
    truth_arr = y_slice.values if isinstance(y_slice, Tensor) else np.asarray(y_slice)
    if pred.values.ndim != 2 or truth_arr.ndim != 2:
        raise ShapeMismatch("ssim2d expects 2-D slices")
    if pred.shape != truth_arr.shape:
        raise ShapeMismatch(f"slice {pred.shape} vs {truth_arr.shape}")
    truth = Tensor(truth_arr.astype(pred.dtype, copy=False))
    x = reshape(pred, (1,) + pred.shape)
    yt = reshape(truth, (1,) + truth.shape)
    return _ssim_pair(x, yt, cfg, _resolve_range(cfg, truth.values))


def ssim_loss(yhat: Tensor, y, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """1 - SSIM."""
    s = ssim(yhat, y, cfg)
    return sub(Tensor(np.asarray(1.0, dtype=s.dtype)), s)


def voxel_mse(yhat: Tensor, y) -> Tensor:
    """Mean squared voxel error over the whole volume."""
    pred = _as_volume_tensor(yhat)
    truth = _ground_truth_tensor(y, pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {truth.shape}")
    return mean_all(square(sub(pred, truth)))


@dataclass
class CombinedLossConfig:
    """Weighting and dispatch for the full training objective."""

    perc_weight: float = 0.5
    perc_mode: str = "cyclic25d"
    schedule: PlaneSchedule = field(default_factory=lambda: PlaneSchedule(120, 0.67))

    def __post_init__(self):
        if self.perc_weight < 0:
            raise ValueError("perc_weight must be >= 0")
        if self.perc_mode not in PERC_MODES:
            raise ValueError(f"perc_mode must be one of {PERC_MODES}")


def combined_loss(
    yhat: Tensor,
    y,
    e: int,
    cfg: CombinedLossConfig = CombinedLossConfig(),
    percCfg: PercConfig | None = None,
    ssimCfg: SsimConfig = SsimConfig(),
) -> Tensor:
    """voxel MSE + (1 - SSIM) + perc_weight * feature loss at epoch e.

    With perc_mode "none" or zero weight the feature term is omitted, making
    the result bit-equal to voxel_mse + ssim_loss.
    """
    base = add(voxel_mse(yhat, y), ssim_loss(yhat, y, ssimCfg))
    if cfg.perc_mode == "none" or cfg.perc_weight == 0.0:
        return base
    if percCfg is None:
        percCfg = PercConfig()
    if cfg.perc_mode == "cyclic25d":
        perc = cyclic_25d(yhat, y, e, cfg.schedule, percCfg)
    elif cfg.perc_mode == "d2":
        perc = perc_2d(yhat, y, percCfg)
    elif cfg.perc_mode == "d3":
        perc = perc_3d(yhat, y, percCfg)
    else:
        perc = perc_25d(yhat, y, percCfg)
    return add(base, scalar_mul(perc, cfg.perc_weight))
