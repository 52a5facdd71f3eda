"""Feature-space (perceptual) losses and the cyclic plane scheduler.

Training cycles through the three anatomical planes, one plane active per
epoch segment, in the fixed order axial, coronal, sagittal. Cycle k has
segment length T_k with T_0 given and T_{k+1} = max(1, round(gamma * T_k))
(round half away from zero), and starts at s_0 = 0, s_{k+1} = s_k + 3 T_k.
The cyclic loss at epoch e is exactly the active plane's loss; the other
plane terms carry indicator weight zero and are never computed.

Each plane loss averages, over the N_p slices of the plane, the feature-map
MSE between min-max normalized slices of the prediction and ground truth.
Normalization divides by (max - min + eps); by default the per-slice min and
max are treated as constants when differentiating (stop-gradient), with a
differentiate-through mode available.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    add,
    div,
    mean_all,
    reduce_max,
    reduce_min,
    slice_view,
    square,
    sub,
)
from .nets import FeatureExtractor, default_extractor_2d, default_extractor_3d, feature_extract
from .volgrid import DEFAULT_EPS_MINMAX, PLANE_AXIS, PLANES, Plane, VolumeGrid


@dataclass
class PlaneSchedule:
    """Cycle bookkeeping: segment durations T_k and cycle starts s_k."""

    T0: int
    gamma: float
    _durations: list = field(default_factory=list, repr=False)
    _starts: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.T0 < 1 or int(self.T0) != self.T0:
            raise ValueError(f"T0 must be a positive integer, got {self.T0}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        self.T0 = int(self.T0)
        self._durations[:] = [self.T0]
        self._starts[:] = [0]

    def _extend_through(self, epoch_or_k: int, by_cycle: bool) -> None:
        def last_covered():
            return self._starts[-1] + 3 * self._durations[-1]

        while (len(self._starts) - 1 < epoch_or_k) if by_cycle else (
            last_covered() <= epoch_or_k
        ):
            t_next = max(1, int(np.floor(self.gamma * self._durations[-1] + 0.5)))
            self._starts.append(last_covered())
            self._durations.append(t_next)

    def duration(self, k: int) -> int:
        """Segment length T_k of cycle k."""
        if k < 0:
            raise ValueError("cycle index must be >= 0")
        self._extend_through(k, by_cycle=True)
        return self._durations[k]

    def start(self, k: int) -> int:
        """First epoch s_k of cycle k."""
        if k < 0:
            raise ValueError("cycle index must be >= 0")
        self._extend_through(k, by_cycle=True)
        return self._starts[k]

    def cycle_index(self, e: int) -> int:
        """The unique k with s_k <= e < s_{k+1}."""
        if e < 0:
            raise ValueError("epoch must be >= 0")
        self._extend_through(e, by_cycle=False)
        return bisect.bisect_right(self._starts, e) - 1


def cycle_start(sched: PlaneSchedule, k: int) -> int:
    return sched.start(k)


def active_plane(sched: PlaneSchedule, e: int) -> Plane:
    """Plane trained at epoch e: segment q = floor((e - s_k) / T_k) of cycle k."""
    k = sched.cycle_index(e)
    q = (e - sched.start(k)) // sched.duration(k)
    return PLANES[q]


# ------------------------------------------------------------------- losses


@dataclass
class PercConfig:
    extractor_2d: FeatureExtractor = field(default_factory=default_extractor_2d)
    extractor_3d: FeatureExtractor = field(default_factory=default_extractor_3d)
    eps_mm: float = DEFAULT_EPS_MINMAX
    baseline_plane: Plane = Plane.SAGITTAL
    differentiate_minmax: bool = False

    def __post_init__(self):
        if not self.eps_mm > 0:
            raise ValueError("eps_mm must be positive")


def _as_volume_tensor(yhat: Tensor) -> Tensor:
    """Accept (D, H, W) or a single-channel (1, D, H, W) prediction."""
    if yhat.values.ndim == 4 and yhat.shape[0] == 1:
        return slice_view(yhat, 0, 0)
    if yhat.values.ndim == 3:
        return yhat
    raise ShapeMismatch(f"expected a volume tensor, got shape {yhat.shape}")


def _ground_truth_tensor(y, dtype) -> Tensor:
    if isinstance(y, VolumeGrid):
        data = y.data
    elif isinstance(y, Tensor):
        data = y.values
    else:
        data = np.asarray(y)
    if data.ndim == 4 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 3:
        raise ShapeMismatch(f"ground truth must be a volume, got shape {data.shape}")
    return Tensor(data.astype(dtype, copy=False))


def normalize_tensor(u: Tensor, eps_mm: float, differentiate_minmax: bool) -> Tensor:
    """(u - min) / (max - min + eps) as a graph op.

    Stop-gradient mode folds min/max in as constants; the differentiate mode
    routes their subgradients to the extremal elements.
    """
    if differentiate_minmax:
        lo = reduce_min(u)
        hi = reduce_max(u)
        return div(sub(u, lo), add(sub(hi, lo), eps_mm))
    lo = float(u.values.min())
    hi = float(u.values.max())
    return div(sub(u, lo), hi - lo + eps_mm)


def plane_perc_loss(yhat: Tensor, y, plane: Plane, cfg: PercConfig) -> Tensor:
    """Slice-averaged feature MSE along one plane."""
    pred = _as_volume_tensor(yhat)
    truth = _ground_truth_tensor(y, pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {truth.shape}")
    axis = PLANE_AXIS[plane]
    n = pred.shape[axis]
    total = None
    for i in range(n):
        f_hat = _slice_features(pred, axis, i, cfg)
        f_true = _slice_features(truth, axis, i, cfg)
        mse = mean_all(square(sub(f_hat, f_true)))
        total = mse if total is None else add(total, mse)
    return div(total, float(n))


def _slice_features(volume: Tensor, axis: int, index: int, cfg: PercConfig) -> Tensor:
    s = slice_view(volume, axis, index)
    s = normalize_tensor(s, cfg.eps_mm, cfg.differentiate_minmax)
    return feature_extract(cfg.extractor_2d, s)


def perc_2d(yhat: Tensor, y, cfg: PercConfig) -> Tensor:
    """Single-plane baseline: the plane loss on cfg.baseline_plane."""
    return plane_perc_loss(yhat, y, cfg.baseline_plane, cfg)


def perc_3d(yhat: Tensor, y, cfg: PercConfig) -> Tensor:
    """Whole-volume feature MSE with volume-scope normalization."""
    pred = _as_volume_tensor(yhat)
    truth = _ground_truth_tensor(y, pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {truth.shape}")
    f_hat = feature_extract(
        cfg.extractor_3d, normalize_tensor(pred, cfg.eps_mm, cfg.differentiate_minmax)
    )
    f_true = feature_extract(
        cfg.extractor_3d, normalize_tensor(truth, cfg.eps_mm, cfg.differentiate_minmax)
    )
    return mean_all(square(sub(f_hat, f_true)))


def perc_25d(yhat: Tensor, y, cfg: PercConfig) -> Tensor:
    """Sum of the three plane losses."""
    total = None
    for plane in PLANES:
        term = plane_perc_loss(yhat, y, plane, cfg)
        total = term if total is None else add(total, term)
    return total


def cyclic_25d(yhat: Tensor, y, e: int, sched: PlaneSchedule, cfg: PercConfig) -> Tensor:
    """The cyclic loss: exactly the active plane's loss at epoch e."""
    return plane_perc_loss(yhat, y, active_plane(sched, e), cfg)
