"""Phantom MRI/PET pairs, paired augmentation, and the training loop.

gen_phantom builds seeded synthetic subjects: the MRI channel is a smoothed
random blob field squashed into (-1, 1); the PET channel is a smooth
nonlinear function of the MRI plus seeded Gaussian hotspots, distorted by a
per-manufacturer intensity affine so the standardization stage has real work
to undo. augment_pair composes elastic deformation and rotation/scale into a
single trilinear warp applied identically to both modalities, adds per-axis
flips, then injects Gaussian noise into the MRI only. Optimization is plain
Adam under a warm-restart cosine schedule; early stopping tracks the best
validation loss from epoch 0 but starts counting stale epochs only after a
delayed activation point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import ShapeMismatch, Tensor, backward, scalar_mul
from .losses import PERC_MODES, CombinedLossConfig, SsimConfig, combined_loss, ssim
from .nets import UNet3DConfig, init_weights, params_to_tensors, save_weights, unet3d_forward
from .percloss import PercConfig, PlaneSchedule, active_plane
from .standardize import apply_std, fit_params, save_params
from .volgrid import VolumeGrid, resample_trilinear


class NonFiniteLoss(RuntimeError):
    """Training objective produced NaN or Inf; aborts with a diagnostic."""


# ------------------------------------------------------------ phantom data


@dataclass(frozen=True)
class ManufacturerEffect:
    """Scanner fingerprint: sampling weight plus an intensity affine."""

    name: str
    weight: float = 1.0
    scale: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("manufacturer name must be non-empty")
        if self.weight < 0:
            raise ValueError("mixture weight must be >= 0")
        if not self.scale > 0:
            raise ValueError("intensity scale must be positive")


DEFAULT_MANUFACTURERS = (
    ManufacturerEffect("siemens", 1.0, 1.0, 0.0),
    ManufacturerEffect("ge", 1.0, 1.6, 0.7),
    ManufacturerEffect("philips", 1.0, 0.8, -0.3),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a seeded synthetic MRI/PET cohort."""

    n_subjects: int
    dims: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    manufacturers: tuple[ManufacturerEffect, ...] = DEFAULT_MANUFACTURERS
    hotspot_count: int = 3
    hotspot_intensity: tuple[float, float] = (0.3, 0.8)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ValueError(f"dims must be three values >= 4, got {self.dims}")
        if any(d % 4 for d in self.dims):
            # two pooling stages in the default generator
            raise ValueError(f"dims must be divisible by 4, got {self.dims}")
        if not self.manufacturers:
            raise ValueError("need at least one manufacturer")
        if not sum(m.weight for m in self.manufacturers) > 0:
            raise ValueError("mixture weights must not all be zero")
        if self.hotspot_count < 0:
            raise ValueError("hotspot_count must be >= 0")
        lo, hi = self.hotspot_intensity
        if not 0 <= lo <= hi:
            raise ValueError("hotspot_intensity must satisfy 0 <= lo <= hi")


def gen_phantom(spec: PhantomSpec) -> list[tuple[VolumeGrid, VolumeGrid, str]]:
    """Generate (mri, pet, manufacturer) triples, bit-identical per seed.

    MRI is a smoothed Gaussian noise field standardized and squashed through
    tanh (range strictly inside (-1, 1)). PET is a fixed smooth nonlinear
    map of the MRI plus seeded Gaussian hotspots, then the manufacturer's
    intensity affine.
    """
    names = [m.name for m in spec.manufacturers]
    weights = np.array([m.weight for m in spec.manufacturers], dtype=np.float64)
    weights /= weights.sum()
    effects = {m.name: m for m in spec.manufacturers}
    dims = spec.dims
    sigma_blob = tuple(d / 10.0 for d in dims)
    radius_lo, radius_hi = min(dims) / 10.0, min(dims) / 5.0
    grid = np.indices(dims, dtype=np.float64)

    subjects = []
    for child in np.random.SeedSequence(spec.seed).spawn(spec.n_subjects):
        rng = np.random.default_rng(child)
        vendor = names[int(rng.choice(len(names), p=weights))]
        smooth = gaussian_filter(rng.normal(size=dims), sigma=sigma_blob)
        z = (smooth - smooth.mean()) / (smooth.std() + 1e-12)
        mri = (0.95 * np.tanh(1.2 * z)).astype(np.float32)

        m = mri.astype(np.float64)
        pet = 0.55 + 0.4 * np.tanh(1.5 * m) + 0.05 * (1.0 - m * m)
        for _ in range(spec.hotspot_count):
            center = rng.uniform(0.15, 0.85, size=3) * (np.asarray(dims) - 1.0)
            radius = rng.uniform(radius_lo, radius_hi)
            amp = rng.uniform(*spec.hotspot_intensity)
            d2 = ((grid - center[:, None, None, None]) ** 2).sum(axis=0)
            pet += amp * np.exp(-d2 / (2.0 * radius * radius))
        eff = effects[vendor]
        pet = eff.scale * pet + eff.bias
        subjects.append(
            (
                VolumeGrid(mri, modality_tag="MRI"),
                VolumeGrid(pet.astype(np.float32), modality_tag="PET"),
                vendor,
            )
        )
    return subjects


# ------------------------------------------------------------- augmentation

ELASTIC_SIGMA_RANGE = (4.0, 7.0)
ELASTIC_MAGNITUDE_RANGE = (50.0, 100.0)
ROTATION_MAX_DEG = 15.0
SCALE_JITTER = 0.1
NOISE_STD_MAX = 0.1
REFERENCE_EXTENT = 128.0


def _rotation_matrix(angles: np.ndarray) -> np.ndarray:
    """Compose per-axis rotations of the (d, h, w) index space."""
    out = np.eye(3)
    for axis, theta in enumerate(angles):
        c, s = math.cos(theta), math.sin(theta)
        r = np.eye(3)
        i, j = [a for a in range(3) if a != axis]
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        out = r @ out
    return out


def _coerce_volume(v):
    if isinstance(v, VolumeGrid):
        return v.data, v.modality_tag, True
    arr = np.ascontiguousarray(v, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeMismatch(f"expected a 3-D volume, got shape {arr.shape}")
    return arr, None, False


def _emit_volume(arr: np.ndarray, tag, was_grid: bool):
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    return VolumeGrid(arr, modality_tag=tag) if was_grid else arr


def augment_pair(x, y, seed):
    """One shared geometric draw for both modalities, noise for x only.

    Elastic deformation, rotation/scale, and per-axis flips each fire with
    probability 0.5; elastic and affine are composed into a single
    displacement field so each modality is interpolated exactly once.
    Gaussian noise with std ~ Uniform(0, NOISE_STD_MAX) is then added to x;
    y is returned bit-exact whenever no geometric component fired.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ax, tag_x, grid_x = _coerce_volume(x)
    ay, tag_y, grid_y = _coerce_volume(y)
    if ax.shape != ay.shape:
        raise ShapeMismatch(f"paired dims differ: {ax.shape} vs {ay.shape}")
    dims = ax.shape
    factor = np.asarray(dims, dtype=np.float64) / REFERENCE_EXTENT

    use_elastic = rng.random() < 0.5
    use_affine = rng.random() < 0.5
    flips = rng.random(3) < 0.5

    disp = None
    if use_elastic:
        sigma = rng.uniform(*ELASTIC_SIGMA_RANGE)
        alpha = rng.uniform(*ELASTIC_MAGNITUDE_RANGE)
        raw = rng.uniform(-1.0, 1.0, size=(3,) + dims)
        disp = np.empty_like(raw)
        for axis in range(3):
            disp[axis] = gaussian_filter(raw[axis], sigma=sigma * factor)
            disp[axis] *= alpha * factor[axis]
    if use_affine:
        angles = np.radians(rng.uniform(-ROTATION_MAX_DEG, ROTATION_MAX_DEG, size=3))
        zoom = rng.uniform(1.0 - SCALE_JITTER, 1.0 + SCALE_JITTER)
        # sampling map: source = M^-1 (o - c) + c, expressed as a displacement
        delta = np.linalg.inv(zoom * _rotation_matrix(angles)) - np.eye(3)
        center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
        rel = np.indices(dims, dtype=np.float64) - center[:, None, None, None]
        affine_disp = np.einsum("ij,j...->i...", delta, rel)
        disp = affine_disp if disp is None else disp + affine_disp

    if disp is not None:
        ax = resample_trilinear(VolumeGrid(ax), disp).data
        ay = resample_trilinear(VolumeGrid(ay), disp).data
    for axis in range(3):
        if flips[axis]:
            ax = np.flip(ax, axis)
            ay = np.flip(ay, axis)

    noise_std = rng.uniform(0.0, NOISE_STD_MAX)
    ax = (ax.astype(np.float64) + noise_std * rng.standard_normal(dims)).astype(np.float32)

    geometric = disp is not None or bool(flips.any())
    x_out = _emit_volume(ax, tag_x, grid_x)
    y_out = y if not geometric else _emit_volume(ay, tag_y, grid_y)
    return x_out, y_out


# ---------------------------------------------------------------- optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates per parameter name, plus step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    mismatch = set(params) ^ set(grads)
    if mismatch:
        raise ShapeMismatch(f"param/grad name mismatch: {sorted(mismatch)}")
    state.t += 1
    c1 = 1.0 - ADAM_BETA1**state.t
    c2 = 1.0 - ADAM_BETA2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} vs param {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


def cosine_lr(t: int, lr_max: float = 5e-4, period: int = 120) -> float:
    """Warm-restart cosine decay from lr_max to 0 over each period."""
    if t < 0:
        raise ValueError("epoch must be >= 0")
    if period < 1:
        raise ValueError("period must be >= 1")
    if not lr_max > 0:
        raise ValueError("lr_max must be positive")
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * (t % period) / period))


# ------------------------------------------------------------ early stopping

EARLY_STOP_MODES = ("after_second_cycle", "after_first_cosine_cycle")


@dataclass
class EarlyStopState:
    best_loss: float = math.inf
    best_epoch: int = -1
    counter: int = 0
    counting_active: bool = False
    activation_epoch: int | None = None


def early_stop_update(
    state: EarlyStopState,
    val_loss: float,
    e: int,
    sched: PlaneSchedule,
    mode: str = "after_second_cycle",
    patience: int = 30,
    cosine_period: int = 120,
) -> bool:
    """Record one validation result; True means training should stop.

    The best loss is tracked from epoch 0, but the staleness counter stays
    frozen at 0 until the activation epoch: the start of plane cycle 2 in
    after_second_cycle mode, or the first cosine restart otherwise.
    """
    if mode not in EARLY_STOP_MODES:
        raise ValueError(f"mode must be one of {EARLY_STOP_MODES}")
    if patience < 1:
        raise ValueError("patience must be >= 1")
    improved = val_loss < state.best_loss
    if improved:
        state.best_loss = float(val_loss)
        state.best_epoch = int(e)
    threshold = sched.start(2) if mode == "after_second_cycle" else cosine_period
    if not state.counting_active and e >= threshold:
        state.counting_active = True
        state.activation_epoch = int(e)
    if state.counting_active:
        state.counter = 0 if improved else state.counter + 1
    return state.counter >= patience


# -------------------------------------------------------------- train loop


@dataclass(frozen=True)
class TrainConfig:
    """Everything the training loop needs, JSON-friendly."""

    max_epochs: int = 1000
    patience: int = 30
    lr_max: float = 5e-4
    cosine_period: int = 120
    batch_size: int = 1
    perc_weight: float = 0.5
    perc_mode: str = "cyclic25d"
    schedule_t0: int = 120
    schedule_gamma: float = 0.67
    early_stop_mode: str = "after_second_cycle"
    seed: int = 0
    val_fraction: float = 0.25
    augment: bool = True
    val_uses_perc: bool = True
    channels_per_level: tuple[int, ...] = (8, 16, 32)
    dropout_p: float = 0.2

    def __post_init__(self):
        object.__setattr__(
            self, "channels_per_level", tuple(int(c) for c in self.channels_per_level)
        )
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.lr_max > 0:
            raise ValueError("lr_max must be positive")
        if self.cosine_period < 1:
            raise ValueError("cosine_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.perc_weight < 0:
            raise ValueError("perc_weight must be >= 0")
        if self.perc_mode not in PERC_MODES:
            raise ValueError(f"perc_mode must be one of {PERC_MODES}")
        if self.early_stop_mode not in EARLY_STOP_MODES:
            raise ValueError(f"early_stop_mode must be one of {EARLY_STOP_MODES}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        self.schedule()  # validate T0/gamma eagerly
        self.unet()

    def schedule(self) -> PlaneSchedule:
        return PlaneSchedule(self.schedule_t0, self.schedule_gamma)

    def unet(self) -> UNet3DConfig:
        return UNet3DConfig(
            channels_per_level=self.channels_per_level, dropout_p=self.dropout_p
        )


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: str
    history_path: str
    std_params_path: str
    best_epoch: int
    best_val_loss: float
    epochs_run: int
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]


HISTORY_COLUMNS = ("epoch", "plane", "lr", "train_loss", "val_loss", "val_ssim")


def partition_dataset(n: int, val_fraction: float, seed: int):
    """Seeded train/val index split with at least one subject on each side."""
    if n < 2:
        raise ValueError("need at least 2 subjects to split")
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = min(max(1, round(n * val_fraction)), n - 1)
    val = tuple(sorted(int(i) for i in perm[:n_val]))
    train = tuple(sorted(int(i) for i in perm[n_val:]))
    return train, val


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_history(path, rows) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for e, plane, lr, train_loss, val_loss, val_ssim in rows:
        lines.append(
            f"{e},{plane},{_fmt(lr)},{_fmt(train_loss)},{_fmt(val_loss)},{_fmt(val_ssim)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def train(config: TrainConfig, dataset, out_dir) -> TrainResult:
    """Fit the generator on (mri, pet, manufacturer) triples.

    The dataset is split by a seeded partition; PET standardization is
    fitted on the train split only and applied everywhere. Each epoch runs
    augmented forward/backward passes with Adam under cosine_lr(e), then an
    unaugmented eval-mode validation pass scored with the same objective at
    the current epoch (switchable to the voxel+SSIM base via
    val_uses_perc=False). The best-validation checkpoint and a history CSV
    land in out_dir. Deterministic per seed; raises NonFiniteLoss as soon
    as any objective stops being finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = list(dataset)
    for mri, pet, _tag in pairs:
        if mri.data.shape != pet.data.shape:
            raise ShapeMismatch(
                f"paired dims differ: {mri.data.shape} vs {pet.data.shape}"
            )

    train_idx, val_idx = partition_dataset(len(pairs), config.val_fraction, config.seed)
    std = fit_params([(pairs[i][1], pairs[i][2]) for i in train_idx])
    std_path = out / "std_params.json"
    save_params(std, std_path)
    inputs = [mri.data for mri, _pet, _tag in pairs]
    targets = [apply_std(pet, tag, std).data for _mri, pet, tag in pairs]

    sched = config.schedule()
    ucfg = config.unet()
    params = init_weights(ucfg, config.seed)
    ptensors = params_to_tensors(params)
    adam = AdamState()
    drop_rng = np.random.default_rng([config.seed, 2])
    loss_cfg = CombinedLossConfig(config.perc_weight, config.perc_mode, sched)
    val_cfg = loss_cfg if config.val_uses_perc else CombinedLossConfig(0.0, "none", sched)
    perc_cfg = PercConfig()
    ssim_cfg = SsimConfig()
    es = EarlyStopState()
    ckpt_path = out / "best.cpwt"

    history = []
    epochs_run = 0
    for e in range(config.max_epochs):
        lr = cosine_lr(e, config.lr_max, config.cosine_period)
        plane = active_plane(sched, e)

        epoch_losses = []
        for group in _chunks(train_idx, config.batch_size):
            for t in ptensors.values():
                t.zero_grad()
            share = 1.0 / len(group)
            for idx in group:
                x_arr, y_arr = inputs[idx], targets[idx]
                if config.augment:
                    x_arr, y_arr = augment_pair(x_arr, y_arr, [config.seed, 3, e, idx])
                pred = unet3d_forward(
                    ptensors, Tensor(x_arr[np.newaxis]), ucfg, train=True, rng=drop_rng
                )
                loss = combined_loss(pred, y_arr, e, loss_cfg, perc_cfg, ssim_cfg)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"train loss {value!r} at epoch {e}, subject {idx}"
                    )
                epoch_losses.append(value)
                backward(scalar_mul(loss, share))
            grads = {
                k: t.grad if t.grad is not None else np.zeros_like(t.values)
                for k, t in ptensors.items()
            }
            adam_step(params, grads, adam, lr)
        train_loss = float(np.mean(epoch_losses))

        val_losses, val_ssims = [], []
        for idx in val_idx:
            pred = unet3d_forward(ptensors, Tensor(inputs[idx][np.newaxis]), ucfg)
            loss = combined_loss(pred, targets[idx], e, val_cfg, perc_cfg, ssim_cfg)
            val_losses.append(loss.item())
            val_ssims.append(ssim(pred, targets[idx], ssim_cfg).item())
        val_loss = float(np.mean(val_losses))
        val_ssim = float(np.mean(val_ssims))
        if not math.isfinite(val_loss):
            raise NonFiniteLoss(f"validation loss {val_loss!r} at epoch {e}")

        stop = early_stop_update(
            es, val_loss, e, sched, config.early_stop_mode,
            config.patience, config.cosine_period,
        )
        if es.best_epoch == e:
            save_weights(params, ckpt_path)
        history.append((e, plane.value, lr, train_loss, val_loss, val_ssim))
        epochs_run = e + 1
        if stop:
            break

    history_path = out / "history.csv"
    _write_history(history_path, history)
    return TrainResult(
        checkpoint_path=str(ckpt_path),
        history_path=str(history_path),
        std_params_path=str(std_path),
        best_epoch=es.best_epoch,
        best_val_loss=es.best_loss,
        epochs_run=epochs_run,
        train_indices=train_idx,
        val_indices=val_idx,
    )
