"""Command-line pipeline driver with strict JSON configs.

Subcommands: gen-phantom, standardize, train, eval, roi, stats, gradcheck.
Each reads one JSON config whose key set is validated strictly (unknown keys
rejected); every relative path inside a config or manifest resolves against
the file that mentions it, so datasets stay relocatable. Global flags:
--seed overrides the config seed, --out overrides the config out_dir, and
--threads bounds internal parallelism (the reference implementation is
sequential, so any value >= 1 behaves identically).

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from csv import reader as csv_reader, writer as csv_writer
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor, check_gradients
from .evalstat import (
    EvalError,
    UnpairedSubjects,
    compare_methods,
    metrics_report,
    roi_table,
    write_metrics_csv,
    write_metrics_json,
    write_roi_csv,
    write_stats_csv,
    write_stats_json,
)
from .losses import SsimConfig, WindowTooLarge, ssim
from .nets import (
    CpwtError,
    UNet3DConfig,
    identity_extractor,
    load_weights,
    params_to_tensors,
    unet3d_forward,
)
from .percloss import PercConfig, PlaneSchedule, cyclic_25d, perc_3d
from .standardize import StandardizeError, apply_std, fit_params, load_params, save_params
from .trainkit import (
    DEFAULT_MANUFACTURERS,
    ManufacturerEffect,
    NonFiniteLoss,
    PhantomSpec,
    TrainConfig,
    gen_phantom,
    train,
)
from .volgrid import NonFinite, RangeEmpty, VvolError, read_vvol, write_vvol

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GRADCHECK_TOL = 1e-4

MANIFEST_COLUMNS = ["subject", "manufacturer", "mri", "pet"]


class ConfigError(Exception):
    """Config file unreadable, malformed, or schema-violating."""


class DataError(Exception):
    """Referenced data (manifest rows, reports, checkpoints) is unusable."""


# ------------------------------------------------------------ config plumbing


def _load_config(path_str: str, required, defaults):
    path = Path(path_str)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    allowed = set(required) | set(defaults)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    missing = sorted(set(required) - set(doc))
    if missing:
        raise ConfigError(f"{path}: missing required keys {missing}")
    merged = dict(defaults)
    merged.update(doc)
    return merged, path.resolve().parent


def _resolve(base: Path, p) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _out_dir(args, doc, base: Path) -> Path:
    if args.out is not None:
        return Path(args.out)
    return _resolve(base, doc["out_dir"])


def _write_manifest(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        wr = csv_writer(f)
        wr.writerow(MANIFEST_COLUMNS)
        wr.writerows(rows)


def _read_manifest(path: Path):
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv_reader(f))
    if not rows or rows[0] != MANIFEST_COLUMNS:
        raise DataError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}")
    out, seen = [], set()
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 4 or not all(row):
            raise DataError(f"{path}: line {ln}: malformed row")
        sid, manufacturer, mri, pet = row
        if sid in seen:
            raise DataError(f"{path}: duplicate subject {sid}")
        seen.add(sid)
        out.append(
            {
                "subject": sid,
                "manufacturer": manufacturer,
                "mri": _resolve(path.parent, mri),
                "pet": _resolve(path.parent, pet),
            }
        )
    if not out:
        raise DataError(f"{path}: no subjects")
    return out


# ---------------------------------------------------------------- subcommands


def _manufacturer_from(doc) -> ManufacturerEffect:
    if not isinstance(doc, dict):
        raise ConfigError("manufacturers entries must be objects")
    unknown = sorted(set(doc) - {"name", "weight", "scale", "bias"})
    if unknown:
        raise ConfigError(f"manufacturer entry: unknown keys {unknown}")
    if "name" not in doc:
        raise ConfigError("manufacturer entry needs a name")
    return ManufacturerEffect(
        doc["name"], doc.get("weight", 1.0), doc.get("scale", 1.0), doc.get("bias", 0.0)
    )


def _cmd_gen_phantom(args) -> int:
    doc, base = _load_config(
        args.config,
        required=("n_subjects",),
        defaults={
            "dims": [32, 32, 32],
            "seed": 0,
            "manufacturers": None,
            "hotspot_count": 3,
            "hotspot_intensity": [0.3, 0.8],
            "out_dir": ".",
        },
    )
    seed = doc["seed"] if args.seed is None else args.seed
    manufacturers = (
        DEFAULT_MANUFACTURERS
        if doc["manufacturers"] is None
        else tuple(_manufacturer_from(m) for m in doc["manufacturers"])
    )
    spec = PhantomSpec(
        n_subjects=doc["n_subjects"],
        dims=tuple(doc["dims"]),
        seed=seed,
        manufacturers=manufacturers,
        hotspot_count=doc["hotspot_count"],
        hotspot_intensity=tuple(doc["hotspot_intensity"]),
    )
    subjects = gen_phantom(spec)
    out = _out_dir(args, doc, base)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (mri, pet, tag) in enumerate(subjects):
        sid = f"sub-{i:03d}"
        write_vvol(mri, out / f"{sid}_mri.vvol")
        write_vvol(pet, out / f"{sid}_pet.vvol")
        rows.append((sid, tag, f"{sid}_mri.vvol", f"{sid}_pet.vvol"))
    _write_manifest(out / "manifest.csv", rows)
    print(f"gen-phantom: {len(rows)} subjects -> {out}")
    return EXIT_OK


def _cmd_standardize(args) -> int:
    doc, base = _load_config(
        args.config,
        required=("manifest",),
        defaults={
            "train_subjects": None,
            "epsilon": 1e-8,
            "mask_background": False,
            "out_dir": ".",
        },
    )
    rows = _read_manifest(_resolve(base, doc["manifest"]))
    if doc["train_subjects"] is None:
        fit_rows = rows
    else:
        by_id = {r["subject"]: r for r in rows}
        missing = [s for s in doc["train_subjects"] if s not in by_id]
        if missing:
            raise DataError(f"train subjects not in manifest: {missing}")
        fit_rows = [by_id[s] for s in doc["train_subjects"]]
    fit_set = [(read_vvol(r["pet"], "PET"), r["manufacturer"]) for r in fit_rows]
    params = fit_params(
        fit_set, epsilon=doc["epsilon"], mask_background=doc["mask_background"]
    )
    out = _out_dir(args, doc, base)
    out.mkdir(parents=True, exist_ok=True)
    save_params(params, out / "std_params.json")
    out_rows = []
    for r in rows:
        std = apply_std(read_vvol(r["pet"], "PET"), r["manufacturer"], params)
        name = f"{r['subject']}_pet_std.vvol"
        write_vvol(std, out / name)
        out_rows.append(
            (r["subject"], r["manufacturer"], os.path.relpath(r["mri"], out), name)
        )
    _write_manifest(out / "manifest.csv", out_rows)
    print(
        f"standardize: fitted on {len(fit_rows)} subjects, "
        f"wrote {len(rows)} standardized volumes -> {out}"
    )
    return EXIT_OK


_TRAIN_KEYS = tuple(f.name for f in dataclass_fields(TrainConfig))


def _cmd_train(args) -> int:
    defaults = {k: None for k in _TRAIN_KEYS}
    defaults["out_dir"] = "."
    doc, base = _load_config(args.config, required=("manifest",), defaults={**defaults, "manifest": None})
    kwargs = {k: doc[k] for k in _TRAIN_KEYS if doc[k] is not None}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    config = TrainConfig(**kwargs)
    rows = _read_manifest(_resolve(base, doc["manifest"]))
    dataset = [
        (read_vvol(r["mri"], "MRI"), read_vvol(r["pet"], "PET"), r["manufacturer"])
        for r in rows
    ]
    out = _out_dir(args, doc, base)
    result = train(config, dataset, out)
    split = {
        "train": [rows[i]["subject"] for i in result.train_indices],
        "val": [rows[i]["subject"] for i in result.val_indices],
    }
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n", encoding="utf-8")
    print(
        f"train: {result.epochs_run} epochs, best val loss {result.best_val_loss:.6g} "
        f"at epoch {result.best_epoch} -> {result.checkpoint_path}"
    )
    return EXIT_OK


def _load_explicit_pairs(pair_docs, base: Path):
    if not isinstance(pair_docs, list) or not pair_docs:
        raise ConfigError("'pairs' must be a non-empty array")
    ids, pairs = [], []
    for i, pd in enumerate(pair_docs):
        if not isinstance(pd, dict):
            raise ConfigError(f"pair entry {i}: must be an object")
        unknown = sorted(set(pd) - {"generated", "truth", "subject"})
        if unknown:
            raise ConfigError(f"pair entry {i}: unknown keys {unknown}")
        for key in ("generated", "truth"):
            if key not in pd:
                raise ConfigError(f"pair entry {i}: missing '{key}'")
        ids.append(str(pd.get("subject", f"pair-{i:03d}")))
        pairs.append(
            (
                read_vvol(_resolve(base, pd["generated"])),
                read_vvol(_resolve(base, pd["truth"])),
            )
        )
    return ids, pairs


def _unet_config_from_weights(weights) -> UNet3DConfig:
    channels = []
    while f"enc{len(channels)}.conv1.w" in weights:
        channels.append(int(weights[f"enc{len(channels)}.conv1.w"].shape[0]))
    if len(channels) < 2 or "out.w" not in weights:
        raise DataError("checkpoint does not look like a generator weight set")
    return UNet3DConfig(
        channels_per_level=tuple(channels),
        in_channels=int(weights["enc0.conv1.w"].shape[1]),
        out_channels=int(weights["out.w"].shape[0]),
        dropout_p=0.0,
    )


def _generate_pairs(doc, base: Path):
    weights = load_weights(_resolve(base, doc["checkpoint"]))
    ucfg = _unet_config_from_weights(weights)
    std = load_params(_resolve(base, doc["std_params"]))
    rows = _read_manifest(_resolve(base, doc["manifest"]))
    if doc["subjects"] is not None:
        by_id = {r["subject"]: r for r in rows}
        missing = [s for s in doc["subjects"] if s not in by_id]
        if missing:
            raise DataError(f"subjects not in manifest: {missing}")
        rows = [by_id[s] for s in doc["subjects"]]
    ptensors = params_to_tensors(weights, requires_grad=False)
    ids, pairs = [], []
    for r in rows:
        mri = read_vvol(r["mri"], "MRI")
        pet = read_vvol(r["pet"], "PET")
        truth = apply_std(pet, r["manufacturer"], std)
        pred = unet3d_forward(ptensors, Tensor(mri.data[np.newaxis]), ucfg)
        ids.append(r["subject"])
        pairs.append((np.asarray(pred.values)[0], truth))
    return ids, pairs


def _cmd_eval(args) -> int:
    doc, base = _load_config(
        args.config,
        required=(),
        defaults={
            "pairs": None,
            "checkpoint": None,
            "manifest": None,
            "std_params": None,
            "subjects": None,
            "out_dir": ".",
        },
    )
    if (doc["pairs"] is None) == (doc["checkpoint"] is None):
        raise ConfigError("eval needs exactly one of 'pairs' or 'checkpoint'")
    if doc["pairs"] is not None:
        if any(doc[k] is not None for k in ("manifest", "std_params", "subjects")):
            raise ConfigError("'pairs' mode does not take manifest/std_params/subjects")
        ids, pairs = _load_explicit_pairs(doc["pairs"], base)
    else:
        for key in ("manifest", "std_params"):
            if doc[key] is None:
                raise ConfigError(f"checkpoint mode needs '{key}'")
        ids, pairs = _generate_pairs(doc, base)
    report = metrics_report(pairs, subject_ids=ids)
    out = _out_dir(args, doc, base)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(report, out / "metrics.csv")
    write_metrics_json(report, out / "metrics.json")
    print(f"eval: {len(ids)} subjects, mean ssim3d {report.mean['ssim3d']:.4f} -> {out}")
    return EXIT_OK


def _cmd_roi(args) -> int:
    doc, base = _load_config(
        args.config, required=("pairs", "labels"), defaults={"out_dir": "."}
    )
    ids, pairs = _load_explicit_pairs(doc["pairs"], base)
    labels = read_vvol(_resolve(base, doc["labels"]), "LABELS")
    table = roi_table(pairs, labels)
    out = _out_dir(args, doc, base)
    out.mkdir(parents=True, exist_ok=True)
    write_roi_csv(table, out / "roi.csv", subject_ids=ids)
    print(f"roi: {len(table.roi_ids)} regions x {len(ids)} subjects -> {out / 'roi.csv'}")
    return EXIT_OK


def _load_report_subjects(path: Path):
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("subjects"), dict):
        raise DataError(f"{path}: not a metrics report (missing 'subjects' table)")
    return doc["subjects"]


def _cmd_stats(args) -> int:
    doc, base = _load_config(
        args.config,
        required=("report_a", "report_b"),
        defaults={
            "contrast": "a_vs_b",
            "alpha": 0.05,
            "directions": None,
            "families": None,
            "out_dir": ".",
        },
    )
    a = _load_report_subjects(_resolve(base, doc["report_a"]))
    b = _load_report_subjects(_resolve(base, doc["report_b"]))
    results = compare_methods(
        a,
        b,
        contrast=doc["contrast"],
        alpha=doc["alpha"],
        directions=doc["directions"],
        families=doc["families"],
    )
    out = _out_dir(args, doc, base)
    out.mkdir(parents=True, exist_ok=True)
    write_stats_csv(results, out / "stats.csv")
    write_stats_json(results, out / "stats.json")
    n_sig = sum(1 for r in results if r.p_adjusted < doc["alpha"])
    print(
        f"stats: {len(results)} endpoints, {n_sig} significant after adjustment -> {out}"
    )
    return EXIT_OK


# ------------------------------------------------------------- gradient check


def _gradcheck_battery(seed: int):
    """FD-safe probes covering every differentiable op family.

    Loss functions treat their second argument as ground truth and detach
    it, so those cases close over a fixed truth volume and sweep only the
    prediction.
    """
    ssim_cfg = SsimConfig(window_size=3, data_range=1.0)
    perc_cfg = PercConfig(
        extractor_2d=identity_extractor("2d"),
        extractor_3d=identity_extractor("3d"),
        differentiate_minmax=True,
    )
    sched = PlaneSchedule(1, 1.0)
    truth = np.random.default_rng(20260816).uniform(-1.0, 1.0, size=(3, 4, 5))
    cases = (
        (
            "elementwise_chain",
            lambda ts: ad.mean_all(
                ad.div(
                    ad.square(ad.tanh(ad.mul(ts[0], ts[1]))),
                    ad.add(ad.square(ts[0]), 1.0),
                )
            ),
            [(3, 4), (3, 4)],
        ),
        (
            "relu_scalar_mul",
            lambda ts: ad.sum_all(ad.scalar_mul(ad.relu(ts[0]), 1.7)),
            [(4, 5)],
        ),
        (
            "reductions",
            lambda ts: ad.add(
                ad.mul(ad.reduce_max(ts[0]), ad.reduce_min(ts[1])),
                ad.add(ad.sum_all(ad.square(ts[0])), ad.mean_all(ts[1])),
            ),
            [(7,), (6,)],
        ),
        (
            "reshape_slice_concat",
            lambda ts: ad.mean_all(
                ad.square(
                    ad.concat(
                        [ad.reshape(ts[0], (6,)), ad.slice_view(ts[1], 0, 1)], axis=0
                    )
                )
            ),
            [(2, 3), (3, 6)],
        ),
        (
            "matmul",
            lambda ts: ad.mean_all(ad.square(ad.matmul(ts[0], ts[1]))),
            [(3, 4), (4, 2)],
        ),
        (
            "conv2d_max_pool",
            lambda ts: ad.mean_all(
                ad.square(ad.max_pool2d(ad.conv2d(ts[0], ts[1], ts[2], padding="same"), 2))
            ),
            [(2, 4, 4), (3, 2, 3, 3), (3,)],
        ),
        (
            "conv3d_norm_upsample",
            lambda ts: ad.mean_all(
                ad.square(
                    ad.nearest_upsample3d(
                        ad.instance_norm3d(
                            ad.conv3d(ts[0], ts[1], ts[2], stride=2), ts[3], ts[4]
                        ),
                        2,
                    )
                )
            ),
            [(1, 6, 6, 6), (2, 1, 2, 2, 2), (2,), (2,), (2,)],
        ),
        (
            "ssim_fixed_range",
            lambda ts: ssim(ts[0], truth[:, :, :4].copy(), ssim_cfg),
            [(3, 4, 4)],
        ),
        (
            "plane_cycled_feature_loss",
            lambda ts: cyclic_25d(ts[0], truth, 0, sched, perc_cfg),
            [(3, 4, 5)],
        ),
        (
            "volumetric_feature_loss",
            lambda ts: perc_3d(ts[0], truth, perc_cfg),
            [(3, 4, 5)],
        ),
    )
    return [
        (name, check_gradients(builder, shapes, seed + i))
        for i, (name, builder, shapes) in enumerate(cases)
    ]


def _cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    print("gradient check (central differences in float64):")
    worst_name, worst = "", -1.0
    for name, err in _gradcheck_battery(seed):
        print(f"  {name:<28s} {err:.3e}")
        if err > worst:
            worst, worst_name = err, name
    ok = worst < GRADCHECK_TOL
    verdict = "pass" if ok else f"FAIL ({worst_name})"
    print(f"gradcheck: max relative error {worst:.3e} [{verdict}]")
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------------- driver

_HANDLERS = {
    "gen-phantom": _cmd_gen_phantom,
    "standardize": _cmd_standardize,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "roi": _cmd_roi,
    "stats": _cmd_stats,
    "gradcheck": _cmd_gradcheck,
}

_SUBCOMMAND_HELP = {
    "gen-phantom": "write a seeded synthetic MRI/PET cohort plus manifest CSV",
    "standardize": "fit by-manufacturer intensity parameters and emit standardized volumes",
    "train": "fit the generator on a manifest; writes checkpoint, history, split",
    "eval": "score generated-vs-truth pairs into metrics CSV/JSON",
    "roi": "summarize regional means and MSE against a label-map volume",
    "stats": "paired one-sided tests between two eval reports",
    "gradcheck": "finite-difference audit of the autodiff engine",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volsynth",
        description="Desk-scale MRI-to-PET synthesis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler_help in _SUBCOMMAND_HELP.items():
        q = sub.add_parser(name, help=handler_help)
        if name != "gradcheck":
            q.add_argument("--config", required=True, help="path to the JSON config")
        q.add_argument("--seed", type=int, default=None, help="override the config seed")
        q.add_argument(
            "--threads",
            type=int,
            default=1,
            help="parallelism bound; 1 is the deterministic reference mode",
        )
        q.add_argument("--out", default=None, help="override the config out_dir")
    return parser


def run_cli(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse printed its own message
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DataError,
        VvolError,
        NonFinite,
        RangeEmpty,
        CpwtError,
        StandardizeError,
        ShapeMismatch,
        UnpairedSubjects,
        FileNotFoundError,
        IsADirectoryError,
        PermissionError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, EvalError, WindowTooLarge) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
