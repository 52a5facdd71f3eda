"""Evaluation metrics, ROI summaries, and the paired statistical protocol.

Volume metrics come in a whole-volume 3-D flavor and a plane-wise flavor
that averages 2-D values over the scaled central slice band of each plane.
Plane-wise PSNR reference and intensity ranges are taken from the whole
ground-truth volume, which keeps near-empty edge slices stable.

The method comparison is a paired design per endpoint: Shapiro-Wilk at
alpha 0.05 gates a one-sided paired t-test against a one-sided Wilcoxon
signed-rank test, and Benjamini-Hochberg adjustment runs separately inside
each endpoint family.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as _sps

from .autodiff import ShapeMismatch, Tensor
from .losses import SsimConfig, ssim, ssim2d
from .volgrid import PLANE_AXIS, PLANES, VolumeGrid, scaled_slice_range


class EvalError(ValueError):
    pass


class DegenerateRange(EvalError):
    pass


class EmptyRoi(EvalError):
    pass


class DegenerateSample(EvalError):
    pass


class AllZeroDifferences(EvalError):
    pass


class OutOfRange(EvalError):
    pass


class UnpairedSubjects(EvalError):
    pass


def _vol(v) -> np.ndarray:
    if isinstance(v, VolumeGrid):
        return v.data.astype(np.float64)
    if isinstance(v, Tensor):
        return np.asarray(v.values, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def _paired(yhat, y):
    a, b = _vol(yhat), _vol(y)
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction {a.shape} vs ground truth {b.shape}")
    return a, b


# ------------------------------------------------------------ voxel metrics


def psnr(yhat, y) -> float:
    """10 log10(R^2 / MSE) with R the ground-truth maximum; +inf at MSE 0."""
    a, b = _paired(yhat, y)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    r = float(b.max())
    if r <= 0.0:
        raise DegenerateRange("ground-truth maximum must be positive for PSNR")
    return 10.0 * math.log10(r * r / mse)


def mae(yhat, y) -> float:
    a, b = _paired(yhat, y)
    return float(np.mean(np.abs(a - b)))


def nmae(yhat, y) -> float:
    """MAE over the ground-truth intensity extent."""
    a, b = _paired(yhat, y)
    width = float(b.max() - b.min())
    if width == 0.0:
        raise DegenerateRange("constant ground truth has no intensity extent")
    return float(np.mean(np.abs(a - b))) / width


def _psnr_fixed(a, b, r) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(r * r / mse)


@dataclass(frozen=True)
class MetricsReport:
    """Per-subject endpoint table plus mean and population std aggregates."""

    endpoints: tuple
    subject_ids: tuple
    per_subject: tuple
    mean: dict
    std: dict


def _subject_metrics(yhat, y, ssim_cfg: SsimConfig) -> dict:
    a, b = _paired(yhat, y)
    width = float(b.max() - b.min())
    if width == 0.0:
        raise DegenerateRange("constant ground truth volume")
    r = float(b.max())
    slice_cfg = (
        ssim_cfg if ssim_cfg.data_range is not None
        else replace(ssim_cfg, data_range=width)
    )
    out = {
        "ssim3d": float(ssim(Tensor(a), b, ssim_cfg).values),
        "psnr3d": psnr(a, b),
        "mae3d": mae(a, b),
        "nmae3d": mae(a, b) / width,
    }
    for plane in PLANES:
        axis = PLANE_AXIS[plane]
        lo, hi = scaled_slice_range(a.shape[axis])
        vals = {"ssim": [], "psnr": [], "mae": [], "nmae": []}
        for i in range(lo, hi):
            sh = np.take(a, i, axis=axis)
            st = np.take(b, i, axis=axis)
            vals["ssim"].append(float(ssim2d(Tensor(sh), st, slice_cfg).values))
            vals["psnr"].append(_psnr_fixed(sh, st, r))
            slice_mae = float(np.mean(np.abs(sh - st)))
            vals["mae"].append(slice_mae)
            vals["nmae"].append(slice_mae / width)
        for name, series in vals.items():
            out[f"{plane.value}_{name}"] = float(np.mean(series))
    return out


def metrics_report(pairs, ssim_cfg: SsimConfig = SsimConfig(), subject_ids=None) -> MetricsReport:
    """Evaluate every (prediction, truth) pair and aggregate across subjects.

    Aggregate std is the population form (ddof 0).
    """
    pairs = list(pairs)
    if not pairs:
        raise EvalError("metrics_report needs at least one pair")
    if subject_ids is None:
        subject_ids = tuple(str(i) for i in range(len(pairs)))
    else:
        subject_ids = tuple(str(s) for s in subject_ids)
        if len(subject_ids) != len(pairs):
            raise UnpairedSubjects("subject_ids length != number of pairs")
    rows = tuple(_subject_metrics(yhat, y, ssim_cfg) for yhat, y in pairs)
    endpoints = tuple(rows[0])
    table = {ep: np.array([row[ep] for row in rows]) for ep in endpoints}
    # identical pairs put the +inf PSNR sentinel here; inf - inf in the
    # std pass is then a deliberate nan, not an error
    with np.errstate(invalid="ignore"):
        mean = {ep: float(v.mean()) for ep, v in table.items()}
        std = {ep: float(v.std()) for ep, v in table.items()}
    return MetricsReport(endpoints, subject_ids, rows, mean, std)


# ------------------------------------------------------------- ROI summaries


def _labels_array(labels, shape) -> np.ndarray:
    lab = labels.data if isinstance(labels, VolumeGrid) else np.asarray(labels)
    lab = np.rint(lab).astype(np.int64)
    if lab.shape != shape:
        raise ShapeMismatch(f"labels {lab.shape} vs volume {shape}")
    if lab.min() < 0:
        raise EvalError("labels must be non-negative")
    return lab


def roi_mean(v, labels, roi_id: int) -> float:
    """Mean intensity over the voxels carrying one label."""
    arr = _vol(v)
    lab = _labels_array(labels, arr.shape)
    mask = lab == int(roi_id)
    if not mask.any():
        raise EmptyRoi(f"label {roi_id} absent")
    return float(arr[mask].mean())


def roi_mse(pairs, labels, roi_id: int) -> float:
    """Mean over subjects of the squared ROI-mean error."""
    pairs = list(pairs)
    if not pairs:
        raise EvalError("roi_mse needs at least one subject")
    errs = [
        (roi_mean(yhat, labels, roi_id) - roi_mean(y, labels, roi_id)) ** 2
        for yhat, y in pairs
    ]
    return float(np.mean(errs))


@dataclass(frozen=True)
class RoiTable:
    """Per-ROI mean pairs for each subject plus the across-subject MSE.

    Label 0 is background and never appears among roi_ids.
    """

    roi_ids: tuple
    truth_means: dict
    generated_means: dict
    mse: dict


def roi_table(pairs, labels) -> RoiTable:
    pairs = list(pairs)
    if not pairs:
        raise EvalError("roi_table needs at least one subject")
    first = _vol(pairs[0][1])
    lab = _labels_array(labels, first.shape)
    ids = tuple(int(i) for i in np.unique(lab) if i > 0)
    if not ids:
        raise EmptyRoi("label map has no foreground labels")
    gen = {i: tuple(roi_mean(yhat, lab, i) for yhat, _ in pairs) for i in ids}
    tru = {i: tuple(roi_mean(y, lab, i) for _, y in pairs) for i in ids}
    mse = {
        i: float(np.mean([(g - t) ** 2 for g, t in zip(gen[i], tru[i])]))
        for i in ids
    }
    return RoiTable(ids, tru, gen, mse)


# ------------------------------------------------------- normal distribution


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _norm_sf(x: float) -> float:
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _norm_ppf(q: float) -> float:
    """Quantile by safeguarded Newton iteration on the erfc-based CDF."""
    if not 0.0 < q < 1.0:
        raise OutOfRange(f"quantile argument must lie in (0, 1), got {q}")
    lo, hi = -1.0, 1.0
    while _norm_cdf(lo) > q:
        lo *= 2.0
    while _norm_cdf(hi) < q:
        hi *= 2.0
    x = 0.5 * (lo + hi)
    for _ in range(200):
        err = _norm_cdf(x) - q
        if err == 0.0:
            break
        if err > 0.0:
            hi = x
        else:
            lo = x
        pdf = _norm_pdf(x)
        nxt = x - err / pdf if pdf > 0.0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= 1e-15 * max(1.0, abs(x)):
            x = nxt
            break
        x = nxt
    return x


# ------------------------------------------------------------- Shapiro-Wilk


def shapiro_wilk(sample) -> tuple:
    """Royston's approximation (algorithm AS R94) of the W test for
    normality. Valid for sample sizes 3 through 5000. The polynomial
    constants below are the published smoothing fits of that algorithm."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    if n < 3 or n > 5000:
        raise EvalError(f"sample size {n} outside [3, 5000]")
    if x[0] == x[-1]:
        raise DegenerateSample("all sample values are equal")
    m = np.array([_norm_ppf((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    ssq = float(m @ m)
    if n == 3:
        a = np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    else:
        rsn = 1.0 / math.sqrt(n)
        an = (
            -2.706056 * rsn**5 + 4.434685 * rsn**4 - 2.071190 * rsn**3
            - 0.147981 * rsn**2 + 0.221157 * rsn + m[-1] / math.sqrt(ssq)
        )
        if n > 5:
            an1 = (
                -3.582633 * rsn**5 + 5.682633 * rsn**4 - 1.752461 * rsn**3
                - 0.293762 * rsn**2 + 0.042981 * rsn + m[-2] / math.sqrt(ssq)
            )
            phi = (ssq - 2.0 * m[-1] ** 2 - 2.0 * m[-2] ** 2) / (
                1.0 - 2.0 * an**2 - 2.0 * an1**2
            )
            a = m / math.sqrt(phi)
            a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
        else:
            phi = (ssq - 2.0 * m[-1] ** 2) / (1.0 - 2.0 * an**2)
            a = m / math.sqrt(phi)
            a[-1], a[0] = an, -an
    centered = x - x.mean()
    w = float(a @ x) ** 2 / float(centered @ centered)
    w = min(w, 1.0)
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, float(min(max(p, 0.0), 1.0))
    if w >= 1.0:
        return w, 1.0
    if n <= 11:
        g = -2.273 + 0.459 * n
        arg = g - math.log1p(-w)
        if arg <= 0.0:
            return w, 0.0
        mu = 0.5440 - 0.39978 * n + 0.025054 * n**2 - 0.0006714 * n**3
        sigma = math.exp(1.3822 - 0.77857 * n + 0.062767 * n**2 - 0.0020322 * n**3)
        z = (-math.log(arg) - mu) / sigma
    else:
        ln_n = math.log(n)
        mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n**2 + 0.0038915 * ln_n**3
        sigma = math.exp(-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n**2)
        z = (math.log1p(-w) - mu) / sigma
    return w, float(min(max(_norm_sf(z), 0.0), 1.0))


# ------------------------------------------------------------- paired tests


def _check_direction(direction: str) -> str:
    if direction not in ("greater", "less"):
        raise EvalError(f"direction must be 'greater' or 'less', got {direction!r}")
    return direction


def paired_t_one_sided(d, direction: str) -> tuple:
    """t = mean / (sample sd / sqrt(n)); one-sided Student tail, df = n - 1."""
    _check_direction(direction)
    d = np.asarray(d, dtype=np.float64)
    n = d.size
    if n < 2:
        raise DegenerateSample("paired t needs at least two differences")
    if np.all(d == d[0]):
        raise DegenerateSample("zero variance of differences")
    sd = float(d.std(ddof=1))
    t = float(d.mean()) / (sd / math.sqrt(n))
    tail = float(_sps.t.sf(t, n - 1))
    p = tail if direction == "greater" else 1.0 - tail
    return float(t), float(min(max(p, 0.0), 1.0))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_correction(v: np.ndarray) -> float:
    _, counts = np.unique(v, return_counts=True)
    return float(np.sum(counts.astype(np.float64) ** 3 - counts))


def wilcoxon_one_sided(d, direction: str, exact_limit: int = 25) -> tuple:
    """One-sided signed-rank test; zeros are dropped before ranking.

    Up to exact_limit nonzero differences the null distribution is built
    exactly (dynamic program over doubled average ranks, identical to
    enumerating all 2^n sign patterns). Beyond that a normal approximation
    with tie and continuity corrections is used.
    """
    _check_direction(direction)
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("every paired difference is zero")
    absd = np.abs(d)
    ranks = _average_ranks(absd)
    wplus = float(ranks[d > 0.0].sum())
    if n <= exact_limit:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        total = int(doubled.sum())
        poly = np.zeros(total + 1, dtype=np.int64)
        poly[0] = 1
        for r in doubled:
            nxt = poly.copy()
            nxt[r:] += poly[: total + 1 - r]
            poly = nxt
        w2 = int(round(2.0 * wplus))
        if direction == "greater":
            count = int(poly[w2:].sum())
        else:
            count = int(poly[: w2 + 1].sum())
        p = count / float(2**n)
    else:
        mn = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_correction(absd) / 48.0
        se = math.sqrt(var)
        if direction == "greater":
            p = _norm_sf((wplus - mn - 0.5) / se)
        else:
            p = _norm_cdf((wplus - mn + 0.5) / se)
    return wplus, float(min(max(p, 0.0), 1.0))


def bh_adjust(pvals) -> list:
    """Benjamini-Hochberg step-up adjustment, returned in input order."""
    p = np.asarray(list(pvals), dtype=np.float64)
    if p.size == 0:
        return []
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise OutOfRange("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    adj = np.empty(m, dtype=np.float64)
    running = 1.0
    for rank in range(m, 0, -1):
        idx = order[rank - 1]
        running = min(running, p[idx] * m / rank)
        adj[idx] = running
    return [float(v) for v in adj]


# -------------------------------------------------------- method comparison


@dataclass(frozen=True)
class StatResult:
    contrast: str
    family: str
    endpoint: str
    direction: str
    test: str
    n: int
    statistic: float
    p_raw: float
    p_adjusted: float
    p_normality: float | None


_METRIC_ROOTS = ("ssim", "psnr", "nmae", "mse", "mae")


def _endpoint_root(endpoint: str) -> str:
    low = endpoint.lower()
    for root in _METRIC_ROOTS:
        if root in low:
            return root
    raise EvalError(
        f"cannot infer a direction for endpoint {endpoint!r}; pass directions="
    )


def _default_direction(endpoint: str) -> str:
    return "greater" if _endpoint_root(endpoint) in ("ssim", "psnr") else "less"


def compare_methods(
    a,
    b,
    contrast: str = "a_vs_b",
    alpha: float = 0.05,
    directions=None,
    families=None,
) -> list:
    """Paired one-sided comparison of method a against method b.

    a and b map subject id -> {endpoint: value} over identical subjects.
    Differences are a - b; quality endpoints (ssim, psnr) test 'greater',
    error endpoints test 'less'. Shapiro-Wilk at the given alpha picks the
    paired t-test; non-normal, too-short, or degenerate samples fall back
    to the Wilcoxon signed-rank test. All-zero differences yield p = 1.
    """
    subjects = sorted(a)
    if sorted(b) != subjects:
        raise UnpairedSubjects("methods were evaluated on different subjects")
    if not subjects:
        raise UnpairedSubjects("no subjects to compare")
    endpoints = sorted(a[subjects[0]])
    for s in subjects:
        if sorted(a[s]) != endpoints or sorted(b[s]) != endpoints:
            raise UnpairedSubjects(f"subject {s!r} lacks some endpoints")
    if families is None:
        families = {}
        for ep in endpoints:
            families.setdefault(_endpoint_root(ep), []).append(ep)
    fam_of = {ep: fam for fam, eps in families.items() for ep in eps}
    missing = [ep for ep in endpoints if ep not in fam_of]
    if missing:
        raise EvalError(f"endpoints without a family: {missing}")

    partial = {}
    for ep in endpoints:
        d = np.array([a[s][ep] - b[s][ep] for s in subjects], dtype=np.float64)
        direction = (
            directions[ep] if directions and ep in directions
            else _default_direction(ep)
        )
        _check_direction(direction)
        norm_p = None
        if np.all(d == 0.0):
            test, stat, p = "wilcoxon", 0.0, 1.0
        else:
            try:
                _, norm_p = shapiro_wilk(d)
            except (DegenerateSample, EvalError):
                norm_p = None
            if norm_p is not None and norm_p >= alpha and not np.all(d == d[0]):
                stat, p = paired_t_one_sided(d, direction)
                test = "paired_t"
            else:
                stat, p = wilcoxon_one_sided(d, direction)
                test = "wilcoxon"
        partial[ep] = (direction, test, stat, p, norm_p)

    results = []
    for fam in sorted(families):
        eps = [ep for ep in families[fam] if ep in partial]
        adj = bh_adjust([partial[ep][3] for ep in eps])
        for ep, p_adj in zip(eps, adj):
            direction, test, stat, p_raw, norm_p = partial[ep]
            results.append(
                StatResult(
                    contrast, fam, ep, direction, test, len(subjects),
                    float(stat), float(p_raw), float(p_adj), norm_p,
                )
            )
    results.sort(key=lambda r: (r.family, r.endpoint))
    return results


# ------------------------------------------------------------------ writers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("subject",) + report.endpoints)
        for sid, row in zip(report.subject_ids, report.per_subject):
            wr.writerow([sid] + [_fmt(row[ep]) for ep in report.endpoints])
        wr.writerow(["mean"] + [_fmt(report.mean[ep]) for ep in report.endpoints])
        wr.writerow(["std"] + [_fmt(report.std[ep]) for ep in report.endpoints])


def write_metrics_json(report: MetricsReport, path) -> None:
    doc = {
        "endpoints": list(report.endpoints),
        "subjects": {
            sid: {ep: row[ep] for ep in report.endpoints}
            for sid, row in zip(report.subject_ids, report.per_subject)
        },
        "mean": report.mean,
        "std": report.std,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_stats_csv(results, path) -> None:
    cols = (
        "contrast", "family", "endpoint", "direction", "test", "n",
        "statistic", "p_raw", "p_adjusted", "p_normality",
    )
    with open(path, "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for r in results:
            wr.writerow(
                [
                    r.contrast, r.family, r.endpoint, r.direction, r.test,
                    str(r.n), _fmt(r.statistic), _fmt(r.p_raw),
                    _fmt(r.p_adjusted),
                    "" if r.p_normality is None else _fmt(r.p_normality),
                ]
            )


def write_stats_json(results, path) -> None:
    doc = [
        {
            "contrast": r.contrast, "family": r.family, "endpoint": r.endpoint,
            "direction": r.direction, "test": r.test, "n": r.n,
            "statistic": r.statistic, "p_raw": r.p_raw,
            "p_adjusted": r.p_adjusted, "p_normality": r.p_normality,
        }
        for r in results
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_roi_csv(table: RoiTable, path, subject_ids=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("roi", "subject", "truth_mean", "generated_mean", "mse"))
        n = len(next(iter(table.truth_means.values()))) if table.roi_ids else 0
        if subject_ids is None:
            subject_ids = [str(s) for s in range(n)]
        elif len(subject_ids) != n:
            raise EvalError(
                f"subject_ids has {len(subject_ids)} entries for {n} subjects"
            )
        for roi in table.roi_ids:
            for s in range(n):
                wr.writerow(
                    [
                        str(roi), str(subject_ids[s]),
                        _fmt(table.truth_means[roi][s]),
                        _fmt(table.generated_means[roi][s]),
                        _fmt(table.mse[roi]),
                    ]
                )
