"""Generator network, perceptual feature extractors, and weight-file I/O.

The generator is a scaled-down 3D U-Net: double conv blocks with instance
norm and ReLU, stride-2 conv downsampling, nearest-upsample + conv decoding,
skip concatenation, dropout at the bottleneck, and a linear 1x1x1 output
head. Feature extractors are small frozen conv/ReLU stacks standing in for a
large pretrained backbone; their weights never train, but gradients flow
through them to the input.

CPWT weight files (little-endian):

    bytes 0..7  magic b"CPWT0001"
    records     u16 name length, UTF-8 name, u32 ndim, ndim * u32 dims,
                IEEE-754 f32 payload in C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .autodiff import (
    ShapeMismatch,
    Tensor,
    concat,
    conv2d,
    conv3d,
    dropout,
    instance_norm3d,
    max_pool2d,
    nearest_upsample3d,
    relu,
    reshape,
)

CPWT_MAGIC = b"CPWT0001"

_MAX_ELEMS = 1 << 31
_MAX_NDIM = 8


class CpwtError(Exception):
    """Malformed CPWT byte stream."""


class BadMagic(CpwtError):
    pass


class TruncatedFile(CpwtError):
    pass


class DuplicateName(CpwtError):
    pass


def save_weights(weights: dict[str, np.ndarray], path) -> None:
    """Serialize a named tensor map; byte-identical for identical input."""
    with open(path, "wb") as f:
        f.write(CPWT_MAGIC)
        for name, arr in weights.items():
            encoded = name.encode("utf-8")
            if not 0 < len(encoded) <= 0xFFFF:
                raise ValueError(f"weight name {name!r} unserializable")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Parse a CPWT file back into a name -> float32 array map."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CPWT_MAGIC) or blob[: len(CPWT_MAGIC)] != CPWT_MAGIC:
        raise BadMagic(f"{path}: not a CPWT file")
    weights: dict[str, np.ndarray] = {}
    pos = len(CPWT_MAGIC)

    def need(nbytes, what):
        if pos + nbytes > len(blob):
            raise TruncatedFile(f"{path}: truncated while reading {what}")

    while pos < len(blob):
        need(2, "name length")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len, "name")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        need(4, "ndim")
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if ndim > _MAX_NDIM:
            raise CpwtError(f"{path}: ndim {ndim} unreasonable")
        need(4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if count > _MAX_ELEMS:
            raise CpwtError(f"{path}: tensor {name} too large")
        need(4 * count, f"payload of {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name in weights:
            raise DuplicateName(f"{path}: tensor {name!r} appears twice")
        weights[name] = arr.copy()
    return weights


# --------------------------------------------------------------------- U-Net


@dataclass(frozen=True)
class UNet3DConfig:
    """Shape of the generator; channel widths per resolution level."""

    channels_per_level: tuple[int, ...] = (8, 16, 32)
    in_channels: int = 1
    out_channels: int = 1
    dropout_p: float = 0.2

    def __post_init__(self):
        if len(self.channels_per_level) < 2:
            raise ValueError("U-Net needs at least 2 levels")
        if any(c < 1 for c in self.channels_per_level):
            raise ValueError("channel widths must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p outside [0, 1)")

    @property
    def levels(self) -> int:
        return len(self.channels_per_level)


def _he_conv(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def _conv_block_params(rng, prefix, c_in, c_out, params):
    for tag, cin in (("conv1", c_in), ("conv2", c_out)):
        params[f"{prefix}.{tag}.w"] = _he_conv(rng, (c_out, cin, 3, 3, 3))
        params[f"{prefix}.{tag}.b"] = np.zeros(c_out, dtype=np.float32)
        params[f"{prefix}.{tag}.gamma"] = np.ones(c_out, dtype=np.float32)
        params[f"{prefix}.{tag}.beta"] = np.zeros(c_out, dtype=np.float32)


def init_weights(config: UNet3DConfig, seed: int) -> dict[str, np.ndarray]:
    """He-initialized conv kernels (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    ch = config.channels_per_level
    params: dict[str, np.ndarray] = {}
    prev = config.in_channels
    for i, c in enumerate(ch):
        _conv_block_params(rng, f"enc{i}", prev, c, params)
        if i < len(ch) - 1:
            params[f"down{i}.w"] = _he_conv(rng, (c, c, 2, 2, 2))
            params[f"down{i}.b"] = np.zeros(c, dtype=np.float32)
        prev = c
    for i in range(len(ch) - 2, -1, -1):
        params[f"up{i}.w"] = _he_conv(rng, (ch[i], ch[i + 1], 3, 3, 3))
        params[f"up{i}.b"] = np.zeros(ch[i], dtype=np.float32)
        _conv_block_params(rng, f"dec{i}", 2 * ch[i], ch[i], params)
    params["out.w"] = _he_conv(rng, (config.out_channels, ch[0], 1, 1, 1))
    params["out.b"] = np.zeros(config.out_channels, dtype=np.float32)
    return params


def params_to_tensors(params: dict[str, np.ndarray], requires_grad=True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _conv_block(x, p, prefix):
    for tag in ("conv1", "conv2"):
        x = conv3d(x, p[f"{prefix}.{tag}.w"], p[f"{prefix}.{tag}.b"], padding="same")
        x = instance_norm3d(x, p[f"{prefix}.{tag}.gamma"], p[f"{prefix}.{tag}.beta"])
        x = relu(x)
    return x


def unet3d_forward(
    params: dict[str, Tensor],
    x: Tensor,
    config: UNet3DConfig = UNet3DConfig(),
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Run the generator; output spatial shape equals input spatial shape."""
    if x.values.ndim != 4 or x.shape[0] != config.in_channels:
        raise ShapeMismatch(
            f"expected ({config.in_channels}, D, H, W) input, got {x.shape}"
        )
    down_factor = 2 ** (config.levels - 1)
    if any(dim % down_factor for dim in x.shape[1:]):
        raise ShapeMismatch(
            f"spatial dims {x.shape[1:]} not divisible by {down_factor}"
        )
    if train and config.dropout_p > 0.0 and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    skips = []
    h = x
    last = config.levels - 1
    for i in range(config.levels):
        h = _conv_block(h, params, f"enc{i}")
        if i < last:
            skips.append(h)
            h = conv3d(h, params[f"down{i}.w"], params[f"down{i}.b"], stride=2)
    if train and config.dropout_p > 0.0:
        h = dropout(h, config.dropout_p, rng)
    for i in range(last - 1, -1, -1):
        h = nearest_upsample3d(h, 2)
        h = conv3d(h, params[f"up{i}.w"], params[f"up{i}.b"], padding="same")
        h = concat([skips[i], h], axis=0)
        h = _conv_block(h, params, f"dec{i}")
    return conv3d(h, params["out.w"], params["out.b"], padding="same")


# ------------------------------------------------------- feature extractors


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen conv/ReLU stack whose tapped activation defines feature space.

    layers is an ordered tuple of ("conv_relu", out_channels) and
    ("pool", size) descriptors; tap_index is the 1-based count of layers to
    apply and must land on a conv_relu entry so the tap is a ReLU output.
    """

    dimensionality: str
    layers: tuple
    tap_index: int
    weights: dict[str, np.ndarray] = field(repr=False)
    input_channels: int = 1

    def __post_init__(self):
        if self.dimensionality not in ("2d", "3d"):
            raise ValueError(f"dimensionality {self.dimensionality!r}")
        if not 1 <= self.tap_index <= len(self.layers):
            raise ValueError("tap_index outside layer stack")
        kind = self.layers[self.tap_index - 1][0]
        if kind != "conv_relu":
            raise ValueError("tap_index must point at a ReLU output")
        if self.dimensionality == "3d" and any(k == "pool" for k, _ in self.layers):
            raise ValueError("pooling is only wired for 2d extractors")


def extractor_weights(
    dimensionality: str, layers, input_channels: int, seed: int
) -> dict[str, np.ndarray]:
    """He-initialized weights for an extractor stack, deterministic per seed."""
    rng = np.random.default_rng(seed)
    kshape = (3, 3) if dimensionality == "2d" else (3, 3, 3)
    weights = {}
    c_in = input_channels
    for idx, (kind, arg) in enumerate(layers):
        if kind == "conv_relu":
            weights[f"layer{idx}.w"] = _he_conv(rng, (arg, c_in) + kshape)
            weights[f"layer{idx}.b"] = np.zeros(arg, dtype=np.float32)
            c_in = arg
        elif kind != "pool":
            raise ValueError(f"unknown layer kind {kind!r}")
    return weights


def build_extractor(
    dimensionality: str,
    layers,
    tap_index: int,
    seed: int,
    input_channels: int = 1,
) -> FeatureExtractor:
    layers = tuple((k, int(a)) for k, a in layers)
    return FeatureExtractor(
        dimensionality,
        layers,
        tap_index,
        extractor_weights(dimensionality, layers, input_channels, seed),
        input_channels,
    )


DEFAULT_LAYERS_2D = (("conv_relu", 4), ("pool", 2), ("conv_relu", 8))
DEFAULT_LAYERS_3D = (("conv_relu", 4), ("conv_relu", 8))
DEFAULT_EXTRACTOR_SEED = 71


@lru_cache(maxsize=None)
def default_extractor_2d() -> FeatureExtractor:
    """Small fixed-seed 2D stack standing in for a pretrained backbone tap."""
    return _default_extractor("2d", DEFAULT_LAYERS_2D, 3, "extractor2d.cpwt")


@lru_cache(maxsize=None)
def default_extractor_3d() -> FeatureExtractor:
    return _default_extractor("3d", DEFAULT_LAYERS_3D, 2, "extractor3d.cpwt")


def _default_extractor(dimensionality, layers, tap, asset_name) -> FeatureExtractor:
    # the shipped asset and the seeded construction are byte-identical; the
    # file is the canonical copy, the seed documents how it was made
    try:
        from importlib import resources

        asset = resources.files("volsynth").joinpath("assets", asset_name)
        with resources.as_file(asset) as path:
            weights = load_weights(path)
        return FeatureExtractor(dimensionality, layers, tap, weights, 1)
    except (FileNotFoundError, ModuleNotFoundError):
        return build_extractor(dimensionality, layers, tap, DEFAULT_EXTRACTOR_SEED)


def identity_extractor(dimensionality: str) -> FeatureExtractor:
    """1x1 conv with unit weight, zero bias, ReLU tap: the identity on
    non-negative input. Used to reduce feature losses to plain MSE."""
    kshape = (1, 1) if dimensionality == "2d" else (1, 1, 1)
    weights = {
        "layer0.w": np.ones((1, 1) + kshape, dtype=np.float32),
        "layer0.b": np.zeros(1, dtype=np.float32),
    }
    return FeatureExtractor(dimensionality, (("conv_relu", 1),), 1, weights, 1)


def feature_extract(phi: FeatureExtractor, s: Tensor) -> Tensor:
    """Activation at phi's tap. Gradients reach s, never phi's weights."""
    nd = 2 if phi.dimensionality == "2d" else 3
    conv = conv2d if nd == 2 else conv3d
    h = s if isinstance(s, Tensor) else Tensor(np.asarray(s))
    if h.values.ndim == nd:
        h = _add_channel(h)
    elif h.values.ndim != nd + 1:
        raise ShapeMismatch(
            f"{phi.dimensionality} extractor got rank-{s.values.ndim} input"
        )
    if h.shape[0] == 1 and phi.input_channels > 1:
        h = concat([h] * phi.input_channels, axis=0)
    if h.shape[0] != phi.input_channels:
        raise ShapeMismatch(
            f"extractor expects {phi.input_channels} channels, got {h.shape[0]}"
        )
    for idx, (kind, arg) in enumerate(phi.layers[: phi.tap_index]):
        if kind == "conv_relu":
            w = Tensor(phi.weights[f"layer{idx}.w"].astype(h.dtype, copy=False))
            b = Tensor(phi.weights[f"layer{idx}.b"].astype(h.dtype, copy=False))
            h = relu(conv(h, w, b, padding="same"))
        else:
            h = max_pool2d(h, arg)
    return h


def _add_channel(t: Tensor) -> Tensor:
    return reshape(t, (1,) + t.shape)
