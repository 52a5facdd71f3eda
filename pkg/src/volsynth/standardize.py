"""By-manufacturer z-standardization with train-only fitting.

Each manufacturer's mean and population standard deviation are pooled over
every voxel of that manufacturer's training volumes. Parameters freeze at
fit time; applying them to held-out volumes never updates them. Persistence
is a small JSON document with full float64 round-trip fidelity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .volgrid import VolumeGrid

DEFAULT_EPS_STD = 1e-8


class StandardizeError(ValueError):
    pass


class EmptyManufacturer(StandardizeError):
    pass


class UnknownManufacturer(StandardizeError):
    pass


class ParseError(StandardizeError):
    pass


class MissingField(StandardizeError):
    pass


@dataclass(frozen=True)
class ManufacturerParams:
    """Frozen per-manufacturer (mean, std) pairs plus the shared epsilon."""

    stats: MappingProxyType
    epsilon: float = DEFAULT_EPS_STD
    fitted_on: str = ""

    def __post_init__(self):
        object.__setattr__(
            self, "stats", MappingProxyType(dict(self.stats))
        )
        for name, (mu, sigma) in self.stats.items():
            if sigma < 0:
                raise StandardizeError(f"negative std for {name!r}")

    def mean(self, m: str) -> float:
        return self._entry(m)[0]

    def std(self, m: str) -> float:
        return self._entry(m)[1]

    def manufacturers(self) -> tuple:
        return tuple(sorted(self.stats))

    def _entry(self, m: str):
        try:
            return self.stats[m]
        except KeyError:
            raise UnknownManufacturer(
                f"no parameters fitted for {m!r}; have {self.manufacturers()}"
            ) from None


def _voxels(v) -> np.ndarray:
    data = v.data if isinstance(v, VolumeGrid) else np.asarray(v)
    return data.reshape(-1).astype(np.float64)


def fit_params(
    train_volumes,
    epsilon: float = DEFAULT_EPS_STD,
    mask_background: bool = False,
    expected=None,
    fitted_on: str | None = None,
) -> ManufacturerParams:
    """Pool voxels per manufacturer tag and fit (mean, population std).

    train_volumes: iterable of (volume, manufacturer tag). mask_background
    drops exactly-zero voxels before pooling. expected, when given, is the
    full set of manufacturers that must appear.
    """
    pooled: dict[str, list] = {}
    digest = hashlib.sha256()
    count = 0
    for v, tag in train_volumes:
        vox = _voxels(v)
        digest.update(str(tag).encode())
        digest.update(np.ascontiguousarray(vox).tobytes())
        if mask_background:
            vox = vox[vox != 0.0]
        pooled.setdefault(str(tag), []).append(vox)
        count += 1
    if count == 0:
        raise EmptyManufacturer("no training volumes given")
    if expected is not None:
        missing = sorted(set(map(str, expected)) - set(pooled))
        if missing:
            raise EmptyManufacturer(f"no volumes for {missing}")
    stats = {}
    for name in sorted(pooled):
        vox = np.concatenate(pooled[name])
        if vox.size == 0:
            raise EmptyManufacturer(f"no voxels left for {name!r} after masking")
        stats[name] = (float(vox.mean()), float(vox.std()))
    if fitted_on is None:
        fitted_on = f"sha256:{digest.hexdigest()[:16]}/n={count}"
    return ManufacturerParams(stats, float(epsilon), fitted_on)


def _transform(v, fn):
    if isinstance(v, VolumeGrid):
        out = fn(v.data.astype(np.float64)).astype(np.float32)
        return VolumeGrid(out, modality_tag=v.modality_tag)
    arr = np.asarray(v)
    return fn(arr.astype(np.float64)).astype(arr.dtype, copy=False)


def apply_std(y, m: str, p: ManufacturerParams):
    """(y - mean_m) / (std_m + epsilon), elementwise."""
    mu, sigma = p.mean(m), p.std(m)
    return _transform(y, lambda a: (a - mu) / (sigma + p.epsilon))


def invert_std(y_std, m: str, p: ManufacturerParams):
    """Map standardized values back to the original intensity scale."""
    mu, sigma = p.mean(m), p.std(m)
    return _transform(y_std, lambda a: a * (sigma + p.epsilon) + mu)


def save_params(p: ManufacturerParams, path) -> None:
    doc = {
        "epsilon": p.epsilon,
        "fitted_on": p.fitted_on,
        "manufacturers": {
            name: {"mean": mu, "std": sigma}
            for name, (mu, sigma) in sorted(p.stats.items())
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_params(path) -> ManufacturerParams:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict) or "manufacturers" not in doc:
        raise MissingField(f"{path}: missing 'manufacturers'")
    stats = {}
    for name, entry in doc["manufacturers"].items():
        for key in ("mean", "std"):
            if not isinstance(entry, dict) or key not in entry:
                raise MissingField(f"{path}: manufacturer {name!r} missing {key!r}")
        stats[name] = (float(entry["mean"]), float(entry["std"]))
    return ManufacturerParams(
        stats,
        float(doc.get("epsilon", DEFAULT_EPS_STD)),
        str(doc.get("fitted_on", "")),
    )
