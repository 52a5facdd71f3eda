"""Release gate: one test per shipped acceptance criterion.

Each criterion is a single test whose name carries its number, so the
verbose pytest report shows exactly one pass/fail line per criterion. The
body also prints an ACCEPTANCE nn PASS/FAIL line for log scraping.
"""

import functools
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats

import conftest

from volsynth import autodiff as ad
from volsynth.autodiff import Tensor, backward, check_gradients
from volsynth.cli import run_cli
from volsynth.evalstat import (
    bh_adjust,
    mae,
    metrics_report,
    nmae,
    paired_t_one_sided,
    psnr,
    roi_mse,
    shapiro_wilk,
    wilcoxon_one_sided,
)
from volsynth.losses import CombinedLossConfig, SsimConfig, combined_loss, ssim, ssim_loss
from volsynth.nets import (
    UNet3DConfig,
    identity_extractor,
    load_weights,
    params_to_tensors,
    save_weights,
    unet3d_forward,
)
from volsynth.percloss import (
    PercConfig,
    PlaneSchedule,
    active_plane,
    cycle_start,
    cyclic_25d,
    perc_25d,
    perc_2d,
    perc_3d,
    plane_perc_loss,
)
from volsynth.standardize import apply_std, fit_params, invert_std
from volsynth.trainkit import PhantomSpec, TrainConfig, gen_phantom, train
from volsynth.volgrid import (
    PLANES,
    VolumeGrid,
    read_vvol,
    scaled_slice_range,
    write_vvol,
)


def criterion(number, label):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                conftest.ACCEPTANCE_RESULTS.append(
                    f"ACCEPTANCE {number:02d} FAIL - {label}"
                )
                raise
            conftest.ACCEPTANCE_RESULTS.append(
                f"ACCEPTANCE {number:02d} PASS - {label}"
            )

        return wrapper

    return deco


# ---------------------------------------------------------------- criterion 1


def reference_plane_plan(t0, gamma, horizon):
    """Independent recursion: unroll segment lengths epoch by epoch."""
    plan, t_k = [], t0
    while len(plan) < horizon:
        for plane in ("axial", "coronal", "sagittal"):
            plan.extend([plane] * t_k)
        t_k = max(1, math.floor(gamma * t_k + 0.5))
    return plan[:horizon]


@criterion(1, "plane scheduler matches independent recursion over 2000 epochs")
def test_c01_scheduler_oracle():
    started = time.monotonic()
    sched = PlaneSchedule(120, 0.67)
    plan = reference_plane_plan(120, 0.67, 2001)
    got = [active_plane(sched, e).value for e in range(2001)]
    assert got == plan
    assert cycle_start(sched, 1) == 360
    assert cycle_start(sched, 2) == 600
    assert cycle_start(sched, 3) == 762
    # within each cycle every plane holds for exactly the cycle's segment
    t_k, start, k = 120, 0, 0
    while start < 2001:
        segment = got[start : start + 3 * t_k]
        for j, plane in enumerate(("axial", "coronal", "sagittal")):
            block = segment[j * t_k : (j + 1) * t_k]
            assert block == [plane] * len(block), (k, plane)
        start += 3 * t_k
        t_k = max(1, math.floor(0.67 * t_k + 0.5))
        k += 1
    assert time.monotonic() - started < 1.0


# ---------------------------------------------------------------- criterion 2


def spike_field(dims=(6, 6, 6)):
    """Constant bias giving every slice of every axis uniquely ordered
    extremes. Adjacent spike levels differ by more than the swept inputs can
    move, so minmax normalization stays smooth under finite differences."""
    field = np.zeros(dims)
    low_rank = high_rank = 0
    for i, j, k in np.ndindex(dims):
        s = (i + j + k) % 6
        if s == 0:
            field[i, j, k] = -10.0 - 1.2 * low_rank
            low_rank += 1
        elif s == 3:
            field[i, j, k] = 10.0 + 1.2 * high_rank
            high_rank += 1
    return field


def tiny_extractor(dimensionality, seed):
    """One conv_relu layer with small weights and a large positive bias, so
    pre-activations stay strictly positive: real features, no ReLU kinks."""
    from volsynth.nets import FeatureExtractor

    rng = np.random.default_rng(seed)
    kshape = (3, 3) if dimensionality == "2d" else (3, 3, 3)
    weights = {
        "layer0.w": np.clip(
            0.03 * rng.standard_normal((2, 1) + kshape), -0.05, 0.05
        ).astype(np.float32),
        "layer0.b": np.full(2, 2.0, dtype=np.float32),
    }
    return FeatureExtractor(dimensionality, (("conv_relu", 2),), 1, weights, 1)


def gradient_cases():
    """Every differentiable primitive plus the shipped losses at 6^3 scale."""
    perc_cfg = PercConfig(
        extractor_2d=tiny_extractor("2d", 5),
        extractor_3d=tiny_extractor("3d", 6),
        differentiate_minmax=True,
    )
    sched = PlaneSchedule(2, 1.0)
    ssim_cfg = SsimConfig(window_size=3, data_range=1.0)
    combined_cfg = CombinedLossConfig(0.5, "cyclic25d", sched)
    truth = np.random.default_rng(77).uniform(-1.0, 1.0, size=(6, 6, 6))
    spikes = spike_field()
    spiked_truth = 0.5 * truth + spikes
    shifted_truth = 0.5 + 0.25 * truth

    def spiked(t):
        return ad.add(ad.scalar_mul(t, 0.5), Tensor(spikes))

    def shifted(t):
        return ad.add(ad.scalar_mul(t, 0.25), 0.5)

    def fixed_dropout(ts):
        return ad.sum_all(ad.square(ad.dropout(ts[0], 0.4, np.random.default_rng(7))))

    return [
        ("add", lambda ts: ad.sum_all(ad.square(ad.add(ts[0], ts[1]))), [(3, 4), (3, 4)]),
        ("sub", lambda ts: ad.sum_all(ad.square(ad.sub(ts[0], ts[1]))), [(3, 4), (3, 4)]),
        ("mul", lambda ts: ad.sum_all(ad.mul(ts[0], ts[1])), [(3, 4), (3, 4)]),
        ("div", lambda ts: ad.sum_all(ad.div(ts[0], ad.add(ts[1], 3.0))), [(3, 4), (3, 4)]),
        ("scalar_mul", lambda ts: ad.sum_all(ad.scalar_mul(ts[0], -1.7)), [(5,)]),
        ("square", lambda ts: ad.sum_all(ad.square(ts[0])), [(4, 3)]),
        ("tanh", lambda ts: ad.sum_all(ad.tanh(ts[0])), [(4, 3)]),
        ("relu", lambda ts: ad.sum_all(ad.relu(ts[0])), [(6, 5)]),
        ("reshape", lambda ts: ad.sum_all(ad.square(ad.reshape(ts[0], (12,)))), [(3, 4)]),
        ("sum_all", lambda ts: ad.sum_all(ad.mul(ts[0], ts[0])), [(7,)]),
        ("mean_all", lambda ts: ad.mean_all(ad.square(ts[0])), [(3, 5)]),
        ("reduce_min", lambda ts: ad.mul(ad.reduce_min(ts[0]), ad.mean_all(ts[0])), [(9,)]),
        ("reduce_max", lambda ts: ad.mul(ad.reduce_max(ts[0]), ad.mean_all(ts[0])), [(9,)]),
        (
            "concat",
            lambda ts: ad.sum_all(ad.square(ad.concat([ts[0], ts[1]], axis=1))),
            [(2, 3), (2, 2)],
        ),
        (
            "slice_view",
            lambda ts: ad.sum_all(ad.square(ad.slice_view(ts[0], 1, 2))),
            [(3, 4)],
        ),
        ("matmul", lambda ts: ad.sum_all(ad.square(ad.matmul(ts[0], ts[1]))), [(3, 4), (4, 2)]),
        (
            "conv2d",
            lambda ts: ad.mean_all(ad.square(ad.conv2d(ts[0], ts[1], ts[2], padding="same"))),
            [(2, 4, 4), (3, 2, 3, 3), (3,)],
        ),
        (
            "conv3d",
            lambda ts: ad.mean_all(ad.square(ad.conv3d(ts[0], ts[1], ts[2], stride=2))),
            [(1, 5, 5, 5), (2, 1, 3, 3, 3), (2,)],
        ),
        (
            "max_pool2d",
            lambda ts: ad.sum_all(ad.square(ad.max_pool2d(ts[0], 2))),
            [(2, 4, 6)],
        ),
        (
            "nearest_upsample3d",
            lambda ts: ad.mean_all(ad.square(ad.nearest_upsample3d(ts[0], 2))),
            [(2, 2, 3, 2)],
        ),
        (
            "instance_norm3d",
            lambda ts: ad.mean_all(ad.square(ad.instance_norm3d(ts[0], ts[1], ts[2]))),
            [(2, 4, 4, 4), (2,), (2,)],
        ),
        ("dropout", fixed_dropout, [(4, 5)]),
        (
            "ssim_loss",
            lambda ts: ssim_loss(shifted(ts[0]), shifted_truth, ssim_cfg),
            [(6, 6, 6)],
        ),
        (
            "perc_2d",
            lambda ts: perc_2d(spiked(ts[0]), spiked_truth, perc_cfg),
            [(6, 6, 6)],
        ),
        (
            "perc_25d",
            lambda ts: perc_25d(spiked(ts[0]), spiked_truth, perc_cfg),
            [(6, 6, 6)],
        ),
        (
            "perc_3d",
            lambda ts: perc_3d(spiked(ts[0]), spiked_truth, perc_cfg),
            [(6, 6, 6)],
        ),
        (
            "cyclic_25d",
            lambda ts: cyclic_25d(spiked(ts[0]), spiked_truth, 3, sched, perc_cfg),
            [(6, 6, 6)],
        ),
        (
            "combined_loss",
            lambda ts: combined_loss(
                spiked(ts[0]), spiked_truth, 3, combined_cfg, perc_cfg, ssim_cfg
            ),
            [(6, 6, 6)],
        ),
    ]


@criterion(2, "finite-difference gradients < 1e-4 for primitives and losses, 3 seeds")
def test_c02_gradient_suite():
    started = time.monotonic()
    failures = []
    for name, builder, shapes in gradient_cases():
        for seed in (0, 1, 2):
            err = check_gradients(builder, shapes, seed)
            if not err < 1e-4:
                failures.append((name, seed, err))
    assert not failures, failures
    # stop_gradient blocks its branch exactly: d/da sum(a * sg(a)) == a
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
    backward(ad.sum_all(ad.mul(a, ad.stop_gradient(a))))
    assert np.array_equal(a.grad, a.values)
    assert time.monotonic() - started < 120.0


# ---------------------------------------------------------------- criterion 3


def minmax_norm(u, eps):
    return (u - u.min()) / (u.max() - u.min() + eps)


@criterion(3, "feature-loss identities: plane sum, active plane, identity-MSE")
def test_c03_loss_identities():
    rng = np.random.default_rng(12)
    a = rng.uniform(-1, 2, (6, 8, 10))
    b = a + rng.normal(0, 0.3, a.shape)
    cfg = PercConfig(
        extractor_2d=identity_extractor("2d"), extractor_3d=identity_extractor("3d")
    )

    plane_losses = [float(plane_perc_loss(Tensor(a), b, p, cfg).values) for p in PLANES]
    total = float(perc_25d(Tensor(a), b, cfg).values)
    assert total == pytest.approx(sum(plane_losses), rel=1e-9)

    sched = PlaneSchedule(3, 0.5)
    for e in (0, 2, 3, 7, 9, 14, 23):
        want = float(
            plane_perc_loss(Tensor(a), b, active_plane(sched, e), cfg).values
        )
        got = float(cyclic_25d(Tensor(a), b, e, sched, cfg).values)
        assert got == want  # bit-equal, same computation path

    # identity extractor reduces the 3-D variant to normalized-volume MSE
    eps = cfg.eps_mm
    oracle_3d = float(np.mean((minmax_norm(a, eps) - minmax_norm(b, eps)) ** 2))
    got_3d = float(perc_3d(Tensor(a), b, cfg).values)
    assert got_3d == pytest.approx(oracle_3d, abs=1e-7)

    # and each plane loss to slice-normalized MSE, averaged over slices
    for axis, plane in enumerate(PLANES):
        per_slice = []
        for i in range(a.shape[axis]):
            sa = np.take(a, i, axis=axis)
            sb = np.take(b, i, axis=axis)
            per_slice.append(
                np.mean((minmax_norm(sa, eps) - minmax_norm(sb, eps)) ** 2)
            )
        oracle_plane = float(np.mean(per_slice))
        got_plane = float(plane_perc_loss(Tensor(a), b, plane, cfg).values)
        assert got_plane == pytest.approx(oracle_plane, abs=1e-7), plane


# ---------------------------------------------------------------- criterion 4


def smooth_volume(dims, phases=(0.0, 1.0, 2.0)):
    axes = [np.sin(np.linspace(0, 3.0, d) + p) for d, p in zip(dims, phases)]
    return np.einsum("i,j,k->ijk", *axes) + 1.5


@criterion(4, "SSIM: identity is one, hand value 0.94595, noise monotonicity")
def test_c04_ssim_properties():
    v = smooth_volume((8, 8, 8))
    assert float(ssim(Tensor(v), v, SsimConfig(window_size=5)).values) == pytest.approx(
        1.0, abs=1e-9
    )

    a = np.full((6, 6, 6), 0.5)
    b = np.full((6, 6, 6), 0.7)
    got = float(ssim(Tensor(a), b, SsimConfig(window_size=5, data_range=1.0)).values)
    assert got == pytest.approx(0.94595, abs=1e-4)

    base = smooth_volume((10, 10, 10))
    cfg = SsimConfig(window_size=5, data_range=float(base.max() - base.min()))
    for seed in range(5):
        bumps = np.random.default_rng(100 + seed).normal(0, 1, base.shape)
        scores = [
            float(ssim(Tensor(base + lvl * bumps), base, cfg).values)
            for lvl in (0.02, 0.05, 0.1, 0.2)
        ]
        assert scores == sorted(scores, reverse=True), (seed, scores)
        assert all(earlier > later for earlier, later in zip(scores, scores[1:]))


# ---------------------------------------------------------------- criterion 5


@criterion(5, "standardization: pooled moments, invertibility, frozen params")
def test_c05_standardization():
    rng = np.random.default_rng(21)
    effects = {"siemens": (1.0, 0.0), "ge": (1.8, 0.6), "philips": (0.7, -0.4)}
    cohort = []
    for i in range(12):
        tag = ("siemens", "ge", "philips")[i % 3]
        scale, shift = effects[tag]
        data = scale * rng.normal(0.5, 0.3, (7, 7, 7)) + shift
        cohort.append((VolumeGrid(data.astype(np.float32), "PET"), tag))
    eps = 1e-8
    params = fit_params(cohort, epsilon=eps)

    for tag in effects:
        pooled = np.concatenate(
            [
                apply_std(v, t, params).data.reshape(-1)
                for v, t in cohort
                if t == tag
            ]
        ).astype(np.float64)
        raw = np.concatenate(
            [v.data.reshape(-1) for v, t in cohort if t == tag]
        ).astype(np.float64)
        sigma = float(raw.std())
        assert abs(pooled.mean()) < 1e-6, tag
        assert pooled.std() == pytest.approx(sigma / (sigma + eps), abs=1e-6), tag

    v, tag = cohort[0]
    rebuilt = invert_std(apply_std(v, tag, params), tag, params)
    assert np.allclose(rebuilt.data, v.data, rtol=1e-6, atol=1e-6)

    frozen = (params.mean("ge"), params.std("ge"), params.epsilon)
    apply_std(VolumeGrid(np.full((4, 4, 4), 50.0, np.float32), "PET"), "ge", params)
    assert (params.mean("ge"), params.std("ge"), params.epsilon) == frozen
    with pytest.raises(AttributeError):
        params.epsilon = 1.0


# ---------------------------------------------------------------- criterion 6


def wilcoxon_enumeration_p(d, direction):
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    ranks = scipy.stats.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if direction == "greater":
            hits += w >= w_obs - 1e-9
        else:
            hits += w <= w_obs + 1e-9
    return hits / 2.0 ** d.size


T_TAIL_FROZEN = [
    # (t, df) -> one-sided tail, frozen from 50-digit integration
    (3.4641016151377544, 2, 0.037089950113724273),
    (1.0, 9, 0.17171819806895676),
    (2.5, 9, 0.01693091384149287),
    (-1.2, 4, 0.85182430334382327),
    (0.0, 7, 0.5),
    (5.0, 29, 1.2683157867711616e-5),
    (2.0, 23, 0.028722274496041362),
    (-3.3, 11, 0.99646100491777012),
]

SHAPIRO_FROZEN = [
    # (sample, W, p) frozen from a reference implementation before the build
    ([-2.1, -1.3, -0.8, -0.4, -0.1, 0.0, 0.2, 0.5, 0.9, 1.1, 1.6, 2.4],
     0.9968697095257911, 0.9999999955206437),
    ([-1.0] * 10 + [1.0] * 10, 0.6411192275791566, 8.099750290870789e-06),
    ([0.1, 0.4, 0.9], 0.9795918367346941, 0.7262263099420617),
    ([2.0, 1.1, -0.4, 0.6], 0.9981417763382172, 0.9941623178984974),
    ([0.5, 0.52, 3.0, 0.1, 0.2], 0.6883921363057997, 0.007212503099971942),
    ([0.486381, -0.477392, 0.66934, -1.387295, 1.665888],
     0.9795007169514909, 0.931929855045767),
    ([-0.575111, -0.622099, 0.080255, 1.252472, -0.323897, -1.101644,
      -0.798735, 1.777451, -0.35041, -1.183625],
     0.8530510547932744, 0.06314720028647955),
    (list(np.round(np.random.default_rng(52).exponential(1.0, 20), 6)),
     0.8318468015040658, 0.0026857760877658124),
    (list(np.round(np.random.default_rng(53).normal(0, 1, 35), 6)),
     0.9673781852268662, 0.3753812596110315),
    (list(np.round(np.random.default_rng(54).uniform(0, 1, 50), 6)),
     0.9244928567392492, 0.0034403359805506707),
]


def unit_vector(n, seed):
    """Fixed direction with exact zero mean and unit sample std."""
    v = np.random.default_rng(seed).normal(0, 1, n)
    v = v - v.mean()
    return v / v.std(ddof=1)


@criterion(6, "statistics oracles: exact Wilcoxon, BH example, t table, Shapiro")
def test_c06_statistics_oracles():
    rng = np.random.default_rng(81)
    checked = 0
    while checked < 50:
        n = int(rng.integers(1, 13))
        d = np.round(rng.normal(0, 1, n), 1)
        if np.all(d == 0):
            continue
        for direction in ("greater", "less"):
            _, p = wilcoxon_one_sided(d, direction)
            assert p == pytest.approx(
                wilcoxon_enumeration_p(d, direction), abs=1e-12
            ), (list(d), direction)
        checked += 1

    assert bh_adjust([0.01, 0.02, 0.04]) == pytest.approx([0.03, 0.03, 0.04])

    # scale fixed zero-mean unit-std directions so the paired t statistic
    # lands exactly on each frozen (t, df) table row
    for row, (t_ref, df, p_ref) in enumerate(T_TAIL_FROZEN):
        n = df + 1
        v = unit_vector(n, 900 + row)
        d = v + t_ref / math.sqrt(n)
        t_got, p_got = paired_t_one_sided(d, "greater")
        assert t_got == pytest.approx(t_ref, rel=1e-12)
        assert p_got == pytest.approx(p_ref, abs=1e-6)

    for sample, w_ref, p_ref in SHAPIRO_FROZEN:
        w, p = shapiro_wilk(sample)
        assert w == pytest.approx(w_ref, abs=1e-3)
        assert p == pytest.approx(p_ref, abs=1e-3)


# ---------------------------------------------------------------- criterion 7


@criterion(7, "metric values equal brute-force loop oracles on 8^3 pairs")
def test_c07_metric_oracles():
    rng = np.random.default_rng(55)
    for _ in range(5):
        a = rng.uniform(0, 2, (8, 8, 8))
        b = rng.uniform(0, 2, (8, 8, 8))

        se, ae = 0.0, 0.0
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    diff = a[i, j, k] - b[i, j, k]
                    se += diff * diff
                    ae += abs(diff)
        n = 8 ** 3
        data_range = b.max() - b.min()
        # reference level for PSNR is the ground-truth maximum
        psnr_oracle = 10.0 * math.log10(float(b.max()) ** 2 / (se / n))
        assert psnr(a, b) == pytest.approx(psnr_oracle, abs=1e-7)
        assert mae(a, b) == pytest.approx(ae / n, abs=1e-7)
        assert nmae(a, b) == pytest.approx(ae / n / data_range, abs=1e-7)

        labels = rng.integers(0, 3, (8, 8, 8))
        for roi in (1, 2):
            mask = labels == roi
            per_subject = (a[mask].mean() - b[mask].mean()) ** 2
            assert roi_mse([(a, b)], labels, roi) == pytest.approx(
                per_subject, abs=1e-7
            )
    assert scaled_slice_range(128) == (20, 90)


# ------------------------------------------------------- criteria 8 and 9


E2E_DIMS = (32, 32, 32)
E2E_CHANNELS = (4, 8, 16)
E2E_EPOCHS = 30


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Shared end-to-end artifacts: one plane-cycled run, one voxel-only run.

    The cohort is generated without hotspots: they are PET-only additions
    drawn independently of the MRI, so no predictor can localize them, and
    with them enabled even the exact smooth-map oracle scores ssim3d ~0.46.
    The gate measures the learnable mapping.
    """
    root = tmp_path_factory.mktemp("desk")
    cohort = gen_phantom(
        PhantomSpec(n_subjects=40, dims=E2E_DIMS, seed=42, hotspot_count=0)
    )
    fit_set, test_set = cohort[:32], cohort[32:]
    runs = {}
    for mode, perc_weight in (("cyclic25d", 0.5), ("none", 0.0)):
        cfg = TrainConfig(
            max_epochs=E2E_EPOCHS,
            patience=30,
            schedule_t0=6,
            schedule_gamma=0.67,
            perc_weight=perc_weight,
            perc_mode=mode,
            channels_per_level=E2E_CHANNELS,
            seed=1,
        )
        started = time.monotonic()
        result = train(cfg, fit_set, root / mode)
        runs[mode] = {
            "result": result,
            "minutes": (time.monotonic() - started) / 60.0,
            "dir": root / mode,
        }
    return {"runs": runs, "test_set": test_set}


def held_out_report(run_dir, test_set):
    from volsynth.standardize import load_params

    std = load_params(Path(run_dir) / "std_params.json")
    weights = params_to_tensors(
        load_weights(Path(run_dir) / "best.cpwt"), requires_grad=False
    )
    ucfg = UNet3DConfig(channels_per_level=E2E_CHANNELS, dropout_p=0.0)
    pairs = []
    for mri, pet, tag in test_set:
        pred = unet3d_forward(weights, Tensor(mri.data[np.newaxis]), ucfg)
        pairs.append((np.asarray(pred.values)[0], apply_std(pet, tag, std)))
    return metrics_report(pairs)


@criterion(8, "desk-scale run: held-out 3-D SSIM >= 0.80, plane labels on schedule")
def test_c08_desk_scale_end_to_end(desk_run):
    cyclic = desk_run["runs"]["cyclic25d"]
    assert len(cyclic["result"].train_indices) == 24
    assert len(cyclic["result"].val_indices) == 8
    assert len(desk_run["test_set"]) == 8
    assert cyclic["result"].epochs_run <= 200
    assert cyclic["minutes"] < 20.0, f"{cyclic['minutes']:.1f} min"

    history = (cyclic["dir"] / "history.csv").read_text().splitlines()[1:]
    sched = PlaneSchedule(6, 0.67)
    for line in history:
        epoch, plane = line.split(",")[:2]
        assert plane == active_plane(sched, int(epoch)).value, epoch

    report = held_out_report(cyclic["dir"], desk_run["test_set"])
    cyclic_ssim = report.mean["ssim3d"]
    assert cyclic_ssim >= 0.80, f"held-out ssim3d {cyclic_ssim:.4f}"

    baseline_ssim = held_out_report(
        desk_run["runs"]["none"]["dir"], desk_run["test_set"]
    ).mean["ssim3d"]
    # comparative result is reported, not gated: superiority needs full-scale data
    print(
        f"  held-out ssim3d: plane-cycled {cyclic_ssim:.4f} "
        f"vs voxel-only {baseline_ssim:.4f}"
    )


@criterion(9, "fixed-seed pipeline reproduces byte-identical CSV and weight files")
def test_c09_pipeline_determinism(tmp_path):
    def pipeline(tag):
        base = tmp_path / tag
        base.mkdir()
        gen = base / "gen.json"
        gen.write_text(
            json.dumps(
                {"n_subjects": 6, "dims": [12, 12, 12], "seed": 9, "out_dir": "raw"}
            )
        )
        assert run_cli(["gen-phantom", "--config", str(gen)]) == 0
        tr = base / "train.json"
        tr.write_text(
            json.dumps(
                {
                    "manifest": "raw/manifest.csv",
                    "out_dir": "run",
                    "max_epochs": 6,
                    "schedule_t0": 2,
                    "schedule_gamma": 1.0,
                    "channels_per_level": [2, 4],
                    "seed": 4,
                }
            )
        )
        assert run_cli(["train", "--config", str(tr)]) == 0
        ev = base / "eval.json"
        ev.write_text(
            json.dumps(
                {
                    "checkpoint": "run/best.cpwt",
                    "manifest": "raw/manifest.csv",
                    "std_params": "run/std_params.json",
                    "out_dir": "eval",
                }
            )
        )
        assert run_cli(["eval", "--config", str(ev)]) == 0
        return base

    first, second = pipeline("one"), pipeline("two")
    compared = 0
    for rel in (
        "raw/manifest.csv",
        "raw/sub-003_pet.vvol",
        "run/history.csv",
        "run/best.cpwt",
        "run/std_params.json",
        "eval/metrics.csv",
        "eval/metrics.json",
    ):
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
        compared += 1
    assert compared == 7


# --------------------------------------------------------------- criterion 10


@criterion(10, "VVOL and CPWT round-trip bit-exactly for 100 random payloads")
def test_c10_format_round_trips(tmp_path):
    rng = np.random.default_rng(64)
    for trial in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 7, 3))
        payload = rng.normal(0, 100, dims).astype(np.float32)
        vol = VolumeGrid(payload, "PET")
        path = tmp_path / f"v{trial}.vvol"
        write_vvol(vol, path)
        back = read_vvol(path, "PET")
        assert back.data.tobytes() == vol.data.tobytes()
        assert back.data.shape == dims

        n_arrays = int(rng.integers(1, 5))
        weights = {}
        for j in range(n_arrays):
            shape = tuple(int(d) for d in rng.integers(1, 5, int(rng.integers(1, 5))))
            weights[f"t{trial}.a{j}"] = rng.normal(0, 3, shape).astype(np.float32)
        wpath = tmp_path / f"w{trial}.cpwt"
        save_weights(weights, wpath)
        loaded = load_weights(wpath)
        assert sorted(loaded) == sorted(weights)
        for name, arr in weights.items():
            assert loaded[name].tobytes() == arr.tobytes()
            assert loaded[name].shape == arr.shape
            assert loaded[name].dtype == arr.dtype
