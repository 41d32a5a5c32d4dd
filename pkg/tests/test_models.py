import numpy as np
import pytest

from fedlora import models as M
from fedlora.errors import ConfigError
from fedlora.tensor import SGDMomentum, softmax_cross_entropy


def test_resnet8_parameter_count_reference():
    spec, params = M.build_resnet8(10, seed=0)
    total = M.count_parameters(params)
    assert abs(total - 1.23e6) / 1.23e6 < 0.02


def test_resnet18_parameter_count_reference():
    spec, params = M.build_resnet18(10, seed=0)
    total = M.count_parameters(params)
    assert abs(total - 44.7e6 / 4) / (44.7e6 / 4) < 0.02


def test_count_parameters_empty_and_filter():
    empty = M.ParamSet()
    assert M.count_parameters(empty) == 0
    spec, params = M.build_tiny(3, (8,), 8, seed=0)
    assert M.count_parameters(params, "trainable") == M.count_parameters(params, "all")
    for _, t in params.items():
        t.requires_grad = False
    assert M.count_parameters(params, "trainable") == 0
    with pytest.raises(ConfigError):
        M.count_parameters(params, "frozen")


def test_parameter_count_is_seed_independent():
    _, a = M.build_resnet8(10, seed=0)
    _, b = M.build_resnet8(10, seed=12345)
    assert M.count_parameters(a) == M.count_parameters(b)


@pytest.mark.parametrize("channels,want", [(64, 32), (1, 1), (256, 32), (16, 16), (33, None)])
def test_group_norm_groups_for(channels, want):
    groups = M.group_norm_groups_for(channels)
    if want is not None:
        assert groups == want
    assert channels % groups == 0


def test_group_counts_divide_for_built_models():
    for build in (M.build_resnet8, M.build_resnet18):
        spec, _ = build(10, seed=0)
        for layer in spec.layers:
            if layer.kind == "group_norm":
                assert layer.channels % layer.groups == 0


@pytest.mark.parametrize("build", [M.build_resnet8, M.build_resnet18])
def test_forward_zeros_batch_finite(build):
    spec, params = build(10, seed=1)
    out = M.forward(spec, params, np.zeros((2, 3, 32, 32), np.float32))
    assert out.shape == (2, 10)
    assert np.isfinite(out.data).all()


def test_zeroed_gammas_trace_logits_equal_fc_bias():
    spec, params = M.build_resnet8(10, seed=2)
    for (lname, role), t in params.items():
        if role == "gamma":
            t.data[...] = 0.0
    bias = np.linspace(-1, 1, 10).astype(np.float32)
    params[("fc", "bias")].data[...] = bias
    rng = np.random.default_rng(3)
    for _ in range(3):
        x = rng.normal(size=(2, 3, 32, 32)).astype(np.float32)
        out = M.forward(spec, params, x)
        assert np.array_equal(out.data, np.tile(bias, (2, 1)))


def test_num_classes_validation():
    with pytest.raises(ConfigError):
        M.build_resnet8(1)


def test_duplicate_layer_names_rejected():
    layers = [M.LayerSpec("a", "relu"), M.LayerSpec("a", "relu")]
    with pytest.raises(ConfigError, match="duplicate"):
        M.ModelSpec("bad", (3, 4, 4), 2, layers)


def _memorize_one_batch(build, steps=50, batch=4, lr=0.05):
    spec, params = build(10, seed=4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(batch, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, size=batch)
    opt = SGDMomentum([t for _, t in params.items()], lr, 0.9)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = softmax_cross_entropy(M.forward(spec, params, x), y)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses


def test_resnet8_trains_on_memorized_batch():
    losses = _memorize_one_batch(M.build_resnet8)
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_resnet18_trains_on_memorized_batch():
    losses = _memorize_one_batch(M.build_resnet18, steps=50, batch=2)
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_tiny_model_shapes():
    spec, params = M.build_tiny(3, (8, 16), 8, seed=0)
    out = M.forward(spec, params, np.zeros((5, 3, 8, 8), np.float32))
    assert out.shape == (5, 3)
    conv_layers = [l for l in spec.layers if l.kind == "conv"]
    assert len(conv_layers) == 2
