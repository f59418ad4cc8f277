import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fddf.disentangle import BRANCHES, RgbImage
from fddf.errors import ConfigurationError, DimensionError
from fddf.model import (
    Backbone,
    BackboneConfig,
    ClassifierHead,
    DynamicFusion,
    FddfModel,
    ModelConfig,
    SEBlock,
    backbone_forward,
    classify,
    dff_fuse,
    fuse_subset,
    model_forward,
    se_block,
)
from fddf.nn import Tensor, functional as F, precision
from fddf.nn.layers import Linear


def feats(rng, branches=BRANCHES, shape=(2, 8, 4, 4)):
    return {b: Tensor(rng.standard_normal(shape)) for b in branches}


def batch(rng, n=2, size=32, branches=BRANCHES):
    out = {b: rng.standard_normal((n, 3, size, size)).astype(np.float32) for b in branches}
    if "moire" in out:
        out["moire"] = rng.standard_normal((n, 3, size // 2, size // 2)).astype(np.float32)
    return out


# SE ------------------------------------------------------------------------


def test_se_zero_input_gives_zero():
    se = SEBlock(np.random.default_rng(0), 8, 4)
    se.fc2.bias.data[...] = 5.0
    assert not se(Tensor(np.zeros((2, 8, 3, 3)))).data.any()


def test_se_is_a_per_channel_gate():
    rng = np.random.default_rng(1)
    x = rng.uniform(0.5, 2.0, (2, 8, 5, 5))
    out = SEBlock(rng, 8, 4)(Tensor(x)).data
    ratio = out / x
    assert np.allclose(ratio, ratio[:, :, :1, :1], atol=1e-6)
    assert np.all(ratio > 0) and np.all(ratio < 1)


def test_se_matches_stepwise_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8, 4, 4))
    fc1, fc2 = Linear(rng, 8, 2), Linear(rng, 2, 8)
    fc1.bias.data[...] = rng.standard_normal(2)
    fc2.bias.data[...] = rng.standard_normal(8)
    with precision(64):
        got = se_block(Tensor(x), fc1, fc2).data
    s = x.mean(axis=(2, 3))
    h = np.maximum(s @ fc1.weight.data.T + fc1.bias.data, 0)
    g = 1 / (1 + np.exp(-(h @ fc2.weight.data.T + fc2.bias.data)))
    np.testing.assert_allclose(got, x * g[:, :, None, None], atol=1e-5)


def test_se_bottleneck_width():
    assert SEBlock(np.random.default_rng(0), 3, 4).fc1.weight.shape == (1, 3)
    assert SEBlock(np.random.default_rng(0), 64, 4).fc1.weight.shape == (16, 64)


# backbone ------------------------------------------------------------------------


def test_backbone_config_validation():
    assert BackboneConfig().downsampling == 8
    assert BackboneConfig().out_channels == 64
    for bad in [dict(stage_channels=()), dict(stage_channels=(16, 0)), dict(blocks_per_stage=0), dict(stem_channels=0)]:
        with pytest.raises(ConfigurationError):
            BackboneConfig(**bad)


def test_backbone_output_shapes_align():
    rng = np.random.default_rng(3)
    cfg = BackboneConfig()
    full = Backbone(rng, cfg, "edge")(Tensor(rng.standard_normal((2, 3, 64, 64)))).shape
    half = Backbone(rng, cfg, "moire")(Tensor(rng.standard_normal((2, 3, 32, 32)))).shape
    assert full == half == (2, 64, 8, 8)


@pytest.mark.parametrize("size", [32, 48, 64, 96])
def test_model_branch_features_share_shape(size):
    model = FddfModel(seed=1)
    out = model.features(batch(np.random.default_rng(size), 2, size))
    assert len({t.shape for t in out.values()}) == 1


def test_backbone_zero_gamma_residual_path():
    rng = np.random.default_rng(4)
    bb = Backbone(rng, BackboneConfig(), "artifact")
    for name, p in bb.named_parameters():
        if name.endswith("conv2.bn.weight"):
            p.data[...] = 0.0
    out = bb(Tensor(np.zeros((2, 3, 32, 32)))).data
    assert np.all(np.isfinite(out))


def test_backbone_shape_error():
    bb = Backbone(np.random.default_rng(0), BackboneConfig(), "edge")
    with pytest.raises(DimensionError):
        bb(Tensor(np.zeros((1, 1, 32, 32))))


def test_backbone_deterministic():
    cfg = BackboneConfig()
    x = np.random.default_rng(5).standard_normal((2, 3, 32, 32))
    a = backbone_forward(x, Backbone(np.random.default_rng(9), cfg, "other", 4)).data
    b = backbone_forward(x, Backbone(np.random.default_rng(9), cfg, "other", 4)).data
    assert a.tobytes() == b.tobytes()


def test_se_only_in_other_branch():
    names = [n for n, _ in FddfModel().named_parameters()]
    se = {n.split(".")[1] for n in names if ".se." in n}
    assert se == {"other"}


# fusion ------------------------------------------------------------------------


def test_fusion_uniform_at_init():
    rng = np.random.default_rng(6)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    f = feats(rng)
    out, w = dff_fuse(f, fusion)
    np.testing.assert_allclose(w.values, 0.25, atol=1e-7)
    np.testing.assert_allclose(out.data, np.mean([f[b].data for b in BRANCHES], axis=0), atol=1e-6)


@pytest.mark.parametrize("hot", range(4))
def test_fusion_one_hot_limit(hot):
    rng = np.random.default_rng(7 + hot)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    fusion.redistribute.bias.data[...] = -30.0
    fusion.redistribute.bias.data[hot] = 30.0
    f = feats(rng)
    out, w = dff_fuse(f, fusion)
    assert w.values[:, hot].min() > 1 - 1e-6
    assert np.max(np.abs(out.data - f[BRANCHES[hot]].data)) < 1e-4


def test_fusion_weighted_sum_oracle():
    rng = np.random.default_rng(8)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    fusion.redistribute.weight.data[...] = rng.standard_normal(fusion.redistribute.weight.shape)
    fusion.redistribute.bias.data[...] = rng.standard_normal(4)
    f = feats(rng)
    out, w = dff_fuse(f, fusion)
    assert np.all(np.abs(w.values.sum(axis=1) - 1) < 1e-6)
    manual = sum(w.values[:, i, None, None, None] * f[b].data for i, b in enumerate(BRANCHES))
    np.testing.assert_allclose(out.data, manual, atol=1e-5)
    for i, got in enumerate((w.alpha, w.beta, w.sigma, w.rho)):
        np.testing.assert_array_equal(got, w.values[:, i])
    np.testing.assert_array_equal(w.full(), w.values)


def test_fusion_adapt_layers_drive_weights_only():
    # F_out depends on the original features, so perturbing adapt params
    # changes the result only through the weights
    rng = np.random.default_rng(9)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    fusion.redistribute.weight.data[...] = rng.standard_normal(fusion.redistribute.weight.shape)
    f = feats(rng)
    out, w = dff_fuse(f, fusion)
    manual = np.einsum("ns,snchw->nchw", w.values, np.stack([f[b].data for b in BRANCHES]))
    np.testing.assert_allclose(out.data, manual, atol=1e-5)


def test_singleton_subset_is_identity():
    rng = np.random.default_rng(10)
    fusion = DynamicFusion(rng, 8, ("edge",))
    f = feats(rng, ("edge",))
    out, w = fuse_subset(f, fusion)
    assert out is f["edge"]
    np.testing.assert_array_equal(w.values, 1.0)
    assert fusion.parameters() == []
    np.testing.assert_array_equal(w.full(), [[0, 1, 0, 0]] * 2)


def test_pair_subset_symmetric():
    rng = np.random.default_rng(11)
    _, w = fuse_subset(feats(rng, ("moire", "edge")), DynamicFusion(rng, 8, ("moire", "edge")))
    np.testing.assert_allclose(w.values, 0.5, atol=1e-7)


def test_fusion_errors():
    rng = np.random.default_rng(12)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    with pytest.raises(ConfigurationError):
        fuse_subset({}, fusion)
    with pytest.raises(ConfigurationError):
        dff_fuse(feats(rng, ("moire", "edge")), DynamicFusion(rng, 8, ("moire", "edge")))
    bad = feats(rng)
    bad["edge"] = Tensor(np.zeros((2, 8, 2, 2)))
    with pytest.raises(DimensionError):
        dff_fuse(bad, fusion)
    with pytest.raises(ConfigurationError):
        ModelConfig(branches=())
    with pytest.raises(ConfigurationError):
        ModelConfig(branches=("moire", "texture"))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sets(st.sampled_from(BRANCHES), min_size=2))
def test_subset_weights_on_simplex(seed, subset):
    rng = np.random.default_rng(seed)
    branches = tuple(b for b in BRANCHES if b in subset)
    fusion = DynamicFusion(rng, 4, branches)
    w = fusion.redistribute.weight
    # fan-in scaled, as at init; larger gaps saturate float32 softmax to exactly 1
    w.data[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
    _, w = fuse_subset(feats(rng, branches, (3, 4, 2, 2)), fusion)
    assert np.all((w.values > 0) & (w.values < 1))
    assert np.all(np.abs(w.values.sum(axis=1) - 1) < 1e-6)


def test_subset_of_all_equals_dff_fuse():
    rng = np.random.default_rng(13)
    fusion = DynamicFusion(rng, 8, BRANCHES)
    fusion.redistribute.weight.data[...] = rng.standard_normal(fusion.redistribute.weight.shape)
    f = feats(rng)
    a, wa = dff_fuse(f, fusion)
    b, wb = fuse_subset(f, fusion)
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(wa.values, wb.values)


# head ------------------------------------------------------------------------


def test_classify_cases():
    rng = np.random.default_rng(14)
    head = ClassifierHead(rng, 8)
    head.fc.weight.data[...] = 0
    head.fc.bias.data[...] = [1.5, -0.5]
    np.testing.assert_allclose(classify(Tensor(np.zeros((2, 8, 4, 4))), head).data, [[1.5, -0.5]] * 2)
    head = ClassifierHead(rng, 8)
    x = rng.standard_normal((1, 8, 4, 4))
    twice = classify(Tensor(np.concatenate([x, x])), head).data
    assert twice[0].tobytes() == twice[1].tobytes()
    pooled = x.reshape(1, 8, -1).mean(axis=2)
    np.testing.assert_allclose(classify(Tensor(x), head).data, pooled @ head.fc.weight.data.T + head.fc.bias.data,
                               atol=1e-5)


# whole model ---------------------------------------------------------------------


def test_parameter_names_unique_and_portable():
    names = [n for n, _ in FddfModel().named_parameters()]
    assert len(names) == len(set(names))
    assert all(set(n) <= set("abcdefghijklmnopqrstuvwxyz0123456789._") for n in names)
    assert "branch.moire.stem.conv.weight" in names
    assert {n.split(".")[0] for n in names} == {"branch", "fusion", "head"}


def test_ablated_model_shares_initial_branch_weights():
    full = dict(FddfModel(seed=4).named_parameters())
    part = dict(FddfModel(ModelConfig(branches=("edge", "other")), seed=4).named_parameters())
    for name, p in part.items():
        if name.startswith("branch."):
            np.testing.assert_array_equal(p.data, full[name].data)
    assert not any(n.startswith("branch.moire") for n in part)


def test_model_forward_probabilities():
    rng = np.random.default_rng(15)
    img = RgbImage(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    model = FddfModel(seed=2)
    probs, w = model_forward(img, model)
    assert abs(probs.sum() - 1) < 1e-6
    assert w.values.shape == (1, 4)
    again, _ = model_forward(img, model)
    assert probs.tobytes() == again.tobytes()
    assert model.training  # mode restored


def test_end_to_end_gradient_flow():
    rng = np.random.default_rng(16)
    model = FddfModel(seed=3)
    model.fusion.redistribute.weight.data[...] = 0.01 * rng.standard_normal(model.fusion.redistribute.weight.shape)
    logits, _ = model(batch(rng, 4))
    F.cross_entropy(logits, np.array([0, 1, 0, 1])).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
    for b in BRANCHES:
        assert np.any(getattr(model.branch, b).stem.conv.weight.grad != 0), b


def test_fusion_weights_simplex_over_random_draws():
    rng = np.random.default_rng(17)
    for i in range(10):
        model = FddfModel(seed=i)
        w = model.fusion.redistribute.weight
        # fan-in scaled; float32 softmax saturates to exactly 1 past a logit gap of ~17
        w.data[...] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[1])
        model.eval()
        _, w = model.predict_proba(batch(rng, 2))
        assert np.all((w.values > 0) & (w.values < 1))
        assert np.all(np.abs(w.values.sum(axis=1) - 1) < 1e-6)
