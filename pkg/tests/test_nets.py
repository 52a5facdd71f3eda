import numpy as np
import pytest

from volsynth.autodiff import Tensor, backward, check_gradients, mean_all
from volsynth.nets import (
    BadMagic,
    CPWT_MAGIC,
    DuplicateName,
    FeatureExtractor,
    TruncatedFile,
    UNet3DConfig,
    build_extractor,
    default_extractor_2d,
    default_extractor_3d,
    feature_extract,
    identity_extractor,
    init_weights,
    load_weights,
    params_to_tensors,
    save_weights,
    unet3d_forward,
)

TINY = UNet3DConfig(channels_per_level=(2, 4), dropout_p=0.2)


# ----------------------------------------------------------------- CPWT file


def test_cpwt_roundtrip_unet_params(tmp_path):
    params = init_weights(TINY, seed=3)
    p = tmp_path / "w.cpwt"
    save_weights(params, p)
    back = load_weights(p)
    assert list(back) == list(params)
    for k in params:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], params[k])
        assert back[k].tobytes() == params[k].tobytes()


def test_cpwt_roundtrip_random_payloads(tmp_path):
    rng = np.random.default_rng(12)
    for i in range(100):
        n_tensors = int(rng.integers(0, 4))
        ws = {}
        for j in range(n_tensors):
            ndim = int(rng.integers(1, 5))
            dims = tuple(int(d) for d in rng.integers(1, 5, size=ndim))
            ws[f"t{j}"] = rng.standard_normal(dims).astype(np.float32)
        p = tmp_path / f"r{i}.cpwt"
        save_weights(ws, p)
        back = load_weights(p)
        assert list(back) == list(ws)
        for k in ws:
            assert back[k].tobytes() == ws[k].tobytes()
            assert back[k].shape == ws[k].shape


def test_cpwt_empty_map(tmp_path):
    p = tmp_path / "e.cpwt"
    save_weights({}, p)
    assert p.stat().st_size == 8
    assert load_weights(p) == {}


def test_cpwt_bad_magic(tmp_path):
    p = tmp_path / "bad.cpwt"
    p.write_bytes(b"NOPE0000")
    with pytest.raises(BadMagic):
        load_weights(p)


def test_cpwt_truncated(tmp_path):
    src = tmp_path / "ok.cpwt"
    save_weights({"a": np.ones((2, 2), dtype=np.float32)}, src)
    blob = src.read_bytes()
    p = tmp_path / "cut.cpwt"
    p.write_bytes(blob[:-3])
    with pytest.raises(TruncatedFile):
        load_weights(p)


def test_cpwt_duplicate_name(tmp_path):
    src = tmp_path / "one.cpwt"
    save_weights({"a": np.ones(2, dtype=np.float32)}, src)
    record = src.read_bytes()[len(CPWT_MAGIC) :]
    p = tmp_path / "dup.cpwt"
    p.write_bytes(CPWT_MAGIC + record + record)
    with pytest.raises(DuplicateName):
        load_weights(p)


# ------------------------------------------------------------- weight init


def test_init_deterministic():
    a = init_weights(TINY, seed=5)
    b = init_weights(TINY, seed=5)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_weights(TINY, seed=6)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith(".w"))


def test_init_he_variance():
    # enc0.conv1 kernels have fan_in 1*3*3*3 = 27; pool >= 10k samples
    rng_cfg = UNet3DConfig(channels_per_level=(4, 8))
    sample = np.concatenate(
        [init_weights(rng_cfg, seed=s)["enc0.conv1.w"].ravel() for s in range(100)]
    )
    assert sample.size >= 10000
    target = 2.0 / 27.0
    assert abs(sample.var() - target) / target < 0.2
    assert abs(sample.mean()) < 0.01


def test_init_biases_zero():
    params = init_weights(TINY, seed=0)
    for k, v in params.items():
        if k.endswith(".b") or k.endswith(".beta"):
            assert np.all(v == 0.0)
        if k.endswith(".gamma"):
            assert np.all(v == 1.0)


# ------------------------------------------------------------------- forward


def test_unet_shape_preserved_16():
    params = params_to_tensors(init_weights(TINY, seed=1), requires_grad=False)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 16, 16, 16)).astype(np.float32))
    out = unet3d_forward(params, x, TINY)
    assert out.shape == (1, 16, 16, 16)
    assert np.all(np.isfinite(out.values))


def test_unet_shape_preserved_various_dims():
    cfg = UNet3DConfig(channels_per_level=(2, 3))
    params = params_to_tensors(init_weights(cfg, seed=1), requires_grad=False)
    for dims in [(4, 4, 4), (8, 4, 6), (2, 2, 2)]:
        x = Tensor(np.ones((1,) + dims, dtype=np.float32))
        assert unet3d_forward(params, x, cfg).shape == (1,) + dims


def test_unet_eval_deterministic():
    params = params_to_tensors(init_weights(TINY, seed=2), requires_grad=False)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 8, 8, 8)).astype(np.float32))
    a = unet3d_forward(params, x, TINY).values
    b = unet3d_forward(params, x, TINY).values
    assert np.array_equal(a, b)


def test_unet_train_mode_needs_rng():
    params = params_to_tensors(init_weights(TINY, seed=2), requires_grad=False)
    x = Tensor(np.ones((1, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        unet3d_forward(params, x, TINY, train=True)


def test_unet_rejects_bad_dims():
    params = params_to_tensors(init_weights(TINY, seed=2), requires_grad=False)
    from volsynth.autodiff import ShapeMismatch

    with pytest.raises(ShapeMismatch):
        unet3d_forward(params, Tensor(np.ones((1, 5, 4, 4), dtype=np.float32)), TINY)
    with pytest.raises(ShapeMismatch):
        unet3d_forward(params, Tensor(np.ones((2, 4, 4, 4), dtype=np.float32)), TINY)


def test_unet_gradcheck_all_params():
    # mean(output) differentiated w.r.t. every parameter on a 1x8^3 input.
    # ReLU sits right after instance norm, which re-centers activations on
    # the kink; finite differences are only meaningful on a stable linear
    # branch, so the check point shifts every post-norm offset (beta) by +3,
    # pushing activations
    # well inside the active region. Gradients are still taken w.r.t. all
    # parameters at that point.
    cfg = UNet3DConfig(channels_per_level=(2, 4), dropout_p=0.0)
    template = init_weights(cfg, seed=0)
    names = list(template)
    x_fixed = np.random.default_rng(3).standard_normal((1, 8, 8, 8))

    def builder(inputs):
        params = {}
        for name, t in zip(names, inputs):
            params[name] = t + 3.0 if name.endswith(".beta") else t
        return mean_all(unet3d_forward(params, Tensor(x_fixed), cfg))

    shapes = [template[n].shape for n in names]
    err = check_gradients(builder, shapes, seed=0)
    assert err < 1e-4, f"U-Net param gradients off by {err:.2e}"


# ------------------------------------------------------------------ extractor


def test_identity_extractor_is_identity_on_nonnegative():
    phi = identity_extractor("2d")
    s = Tensor(np.random.default_rng(0).uniform(0, 1, (5, 7)))
    out = feature_extract(phi, s)
    assert out.shape == (1, 5, 7)
    assert np.allclose(out.values[0], s.values)


def test_default_2d_feature_shape():
    phi = default_extractor_2d()
    out = feature_extract(phi, Tensor(np.random.default_rng(0).uniform(0, 1, (16, 16)).astype(np.float32)))
    assert out.shape == (8, 8, 8)


def test_default_3d_feature_shape():
    phi = default_extractor_3d()
    out = feature_extract(phi, Tensor(np.ones((6, 6, 6), dtype=np.float32)))
    assert out.shape == (8, 6, 6, 6)


def test_zero_slice_zero_features():
    phi = default_extractor_2d()  # zero biases, so homogeneous
    out = feature_extract(phi, Tensor(np.zeros((8, 8), dtype=np.float32)))
    assert np.all(out.values == 0.0)


def test_default_extractor_matches_seeded_build():
    from volsynth.nets import DEFAULT_EXTRACTOR_SEED, DEFAULT_LAYERS_2D

    phi = default_extractor_2d()
    rebuilt = build_extractor("2d", DEFAULT_LAYERS_2D, 3, DEFAULT_EXTRACTOR_SEED)
    assert list(phi.weights) == list(rebuilt.weights)
    for k in phi.weights:
        assert np.array_equal(phi.weights[k], rebuilt.weights[k])


def test_extractor_weights_never_get_grads():
    phi = default_extractor_2d()
    s = Tensor(np.random.default_rng(2).uniform(0.1, 1, (8, 8)), requires_grad=True)
    out = feature_extract(phi, s)
    backward(mean_all(out))
    assert s.grad is not None
    assert np.any(s.grad != 0.0)


def lifted_extractor(phi, shift=2.0):
    """Copy of an extractor with biases shifted positive, so every ReLU unit
    is active and pool windows are tie-free: a kink-free point for finite
    differences. Architecture and gradient path are unchanged."""
    weights = {
        k: (v + shift if k.endswith(".b") else v).astype(np.float32)
        for k, v in phi.weights.items()
    }
    return FeatureExtractor(
        phi.dimensionality, phi.layers, phi.tap_index, weights, phi.input_channels
    )


def test_extractor_gradients_flow_to_input():
    phi = lifted_extractor(default_extractor_2d())
    err = check_gradients(
        lambda ins: mean_all(feature_extract(phi, ins[0])), [(8, 8)], seed=1
    )
    assert err < 1e-4


def test_channel_replication():
    phi = build_extractor("2d", (("conv_relu", 2),), 1, seed=0, input_channels=3)
    out = feature_extract(phi, Tensor(np.ones((4, 4), dtype=np.float32)))
    assert out.shape == (2, 4, 4)


def test_tap_index_must_hit_relu():
    with pytest.raises(ValueError):
        FeatureExtractor("2d", (("conv_relu", 4), ("pool", 2)), 2, {}, 1)
