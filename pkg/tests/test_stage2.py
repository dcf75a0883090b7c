"""Fusion network: ISAM attention, FPM purification, decoder, training probe."""

import numpy as np
import pytest

from zvos.autodiff import Tensor, backward
from zvos.errors import ConfigError, ContractError, DimensionError
from zvos.metrics import region_j
from zvos.stage1 import MultiTaskModel, multitask_forward
from zvos.stage2 import (FpmLevel, FusionModel, IsamBranch, enhance,
                         fpm_forward, fusion_forward, isam_forward,
                         load_stage2, save_stage2, stage2_loss)
from zvos.synth import GeneratorConfig, flow_to_color, generate_sequence
from zvos.train import SGD

from oracles import adaptive_pool_loops, bilinear_loops, conv2d_loops

TINY = (4, 6, 6, 6, 6)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _branches(rng, c_in, c_mid, n_src=4, zero=False):
    def t(*shape):
        data = np.zeros(shape) if zero else rng.normal(0, 0.3, size=shape)
        return Tensor(data, requires_grad=True)

    cat_c = n_src * c_in
    return [IsamBranch(mix_w=t(c_mid, cat_c, 3, 3), mix_b=t(c_mid),
                       squeeze_w=t(1, c_mid, 3, 3), squeeze_b=t(1),
                       att_w=t(1, 4, 1, 1), att_b=t(1))
            for _ in range(n_src)]


def _features(rng, n_src=4, shape=(2, 8, 16, 16)):
    return [Tensor(rng.uniform(size=shape)) for _ in range(n_src)]


# -------------------------------------------------------------------- ISAM


def test_isam_zero_weights_closed_form(rng):
    feats = _features(rng)
    enhanced, attentions = isam_forward(_branches(rng, 8, 5, zero=True), feats)
    for f, e, a in zip(feats, enhanced, attentions):
        np.testing.assert_array_equal(a.data, 0.5)
        np.testing.assert_array_equal(e.data, 1.5 * f.data)


def test_isam_shape_contract(rng):
    enhanced, attentions = isam_forward(_branches(rng, 8, 5), _features(rng))
    assert [e.data.shape for e in enhanced] == [(2, 8, 16, 16)] * 4
    assert [a.data.shape for a in attentions] == [(2, 1, 16, 16)] * 4


def test_isam_matches_composition_oracle(rng):
    feats = _features(rng, shape=(1, 3, 12, 12))
    branches = _branches(rng, 3, 4)
    enhanced, attentions = isam_forward(branches, feats)
    cat = np.concatenate([f.data for f in feats], axis=1)
    h = w = 12
    for k, branch in enumerate(branches):
        mixed = np.maximum(conv2d_loops(cat, branch.mix_w.data, branch.mix_b.data,
                                        stride=1, padding=1), 0.0)
        squeezed = conv2d_loops(mixed, branch.squeeze_w.data, branch.squeeze_b.data,
                                stride=1, padding=1)
        pooled = [bilinear_loops(adaptive_pool_loops(squeezed, bins), h, w)
                  for bins in (2, 4, 6, 1)]
        att = _sigmoid(conv2d_loops(np.concatenate(pooled, axis=1),
                                    branch.att_w.data, branch.att_b.data))
        np.testing.assert_allclose(attentions[k].data, att, atol=1e-12)
        np.testing.assert_allclose(enhanced[k].data,
                                   feats[k].data * (1.0 + att), atol=1e-12)


def test_isam_attention_bounds_and_residual(rng):
    feats = _features(rng)  # nonnegative inputs
    enhanced, attentions = isam_forward(_branches(rng, 8, 5), feats)
    for f, e, a in zip(feats, enhanced, attentions):
        assert a.data.min() > 0.0 and a.data.max() < 1.0
        assert np.all(e.data >= f.data) and np.all(e.data <= 2.0 * f.data)


def test_enhance_identity_when_attention_is_zero(rng):
    feature = Tensor(rng.normal(size=(2, 6, 8, 8)))
    out = enhance(feature, Tensor(np.zeros((2, 1, 8, 8))))
    np.testing.assert_array_equal(out.data, feature.data)
    with pytest.raises(DimensionError):
        enhance(feature, Tensor(np.zeros((2, 2, 8, 8))))


def test_isam_input_validation(rng):
    branches = _branches(rng, 8, 5)
    feats = _features(rng)
    with pytest.raises(DimensionError):
        isam_forward(branches[:3], feats)
    bad = feats[:3] + [Tensor(rng.uniform(size=(2, 8, 8, 8)))]
    with pytest.raises(DimensionError):
        isam_forward(branches, bad)


# --------------------------------------------------------------------- FPM


def _fpm_level(rng, cat_c, c_mid, tie=False, zero_exclu=False):
    comm_w = rng.normal(0, 0.3, size=(c_mid, cat_c, 3, 3))
    comm_b = rng.normal(0, 0.3, size=c_mid)
    if tie:
        exclu_w, exclu_b = comm_w.copy(), comm_b.copy()
    elif zero_exclu:
        exclu_w, exclu_b = np.zeros_like(comm_w), np.zeros_like(comm_b)
    else:
        exclu_w = rng.normal(0, 0.3, size=(c_mid, cat_c, 3, 3))
        exclu_b = rng.normal(0, 0.3, size=c_mid)
    return FpmLevel(Tensor(comm_w, requires_grad=True), Tensor(comm_b, requires_grad=True),
                    Tensor(exclu_w, requires_grad=True), Tensor(exclu_b, requires_grad=True))


def test_fpm_identical_branches_cancel(rng):
    level = _fpm_level(rng, 32, 5, tie=True)
    out = fpm_forward(level, _features(rng))
    np.testing.assert_array_equal(out.data, 0.0)


def test_fpm_zero_exclusive_is_pure_common(rng):
    feats = _features(rng)
    level = _fpm_level(rng, 32, 5, zero_exclu=True)
    out = fpm_forward(level, feats)
    cat = np.concatenate([f.data for f in feats], axis=1)
    comm = conv2d_loops(cat, level.comm_w.data, level.comm_b.data, stride=1, padding=1)
    np.testing.assert_allclose(out.data, comm, atol=1e-12)


def test_fpm_matches_conv_oracle(rng):
    feats = _features(rng, shape=(1, 3, 10, 10))
    level = _fpm_level(rng, 12, 4)
    out = fpm_forward(level, feats)
    cat = np.concatenate([f.data for f in feats], axis=1)
    comm = conv2d_loops(cat, level.comm_w.data, level.comm_b.data, stride=1, padding=1)
    exclu = conv2d_loops(cat, level.exclu_w.data, level.exclu_b.data, stride=1, padding=1)
    np.testing.assert_allclose(out.data, comm - exclu, atol=1e-12)
    assert out.data.shape == (1, 4, 10, 10)


def test_fpm_swapping_branches_negates(rng):
    feats = _features(rng)
    level = _fpm_level(rng, 32, 5)
    swapped = FpmLevel(level.exclu_w, level.exclu_b, level.comm_w, level.comm_b)
    np.testing.assert_array_equal(fpm_forward(swapped, feats).data,
                                  -fpm_forward(level, feats).data)


def test_fpm_shape_validation(rng):
    level = _fpm_level(rng, 32, 5)
    feats = _features(rng)[:3] + [Tensor(rng.uniform(size=(2, 8, 4, 4)))]
    with pytest.raises(DimensionError):
        fpm_forward(level, feats)


# ------------------------------------------------------------ full forward


def _upstream(rng, batch=1, side=64):
    model = MultiTaskModel(TINY, rng=rng)
    x = Tensor(rng.uniform(size=(batch, 3, side, side)))
    return model, x, multitask_forward(model, x)


def test_fusion_forward_shape_contract(rng):
    _, x, up = _upstream(rng)
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    flow_rgb = Tensor(rng.uniform(size=(1, 3, 64, 64)))
    out = fusion_forward(fusion, x, flow_rgb, up)
    assert out.data.shape == (1, 1, 64, 64)
    assert out.data.min() > 0.0 and out.data.max() < 1.0


def test_fusion_zero_head_gives_half(rng):
    _, x, up = _upstream(rng, side=32)
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    fusion.params["dec.head.w"].data[...] = 0.0
    fusion.params["dec.head.b"].data[...] = 0.0
    out = fusion_forward(fusion, x, Tensor(rng.uniform(size=(1, 3, 32, 32))), up)
    np.testing.assert_array_equal(out.data, 0.5)


def test_fusion_requires_upstream_and_matching_flow(rng):
    _, x, up = _upstream(rng, side=32)
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    flow_rgb = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    with pytest.raises(ContractError):
        fusion_forward(fusion, x, flow_rgb, None)
    with pytest.raises(DimensionError):
        fusion_forward(fusion, x, Tensor(rng.uniform(size=(1, 3, 64, 64))), up)


def test_fusion_batch_equivariance(rng):
    stage1 = MultiTaskModel(TINY, rng=rng)
    x = rng.uniform(size=(3, 3, 32, 32))
    flow_rgb = rng.uniform(size=(3, 3, 32, 32))
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    out = fusion_forward(fusion, Tensor(x), Tensor(flow_rgb),
                         multitask_forward(stage1, Tensor(x))).data
    perm = [2, 0, 1]
    out_p = fusion_forward(fusion, Tensor(x[perm]), Tensor(flow_rgb[perm]),
                           multitask_forward(stage1, Tensor(x[perm]))).data
    np.testing.assert_array_equal(out_p, out[perm])


def test_source_subsets_change_parameter_count(rng):
    full = FusionModel(TINY, c_mid=6, sources=("rgb", "d", "op", "ss"), rng=rng)
    slim = FusionModel(TINY, c_mid=6, sources=("rgb",), use_isam=False,
                       use_fpm=False, rng=rng)
    assert len(full.params.names()) > len(slim.params.names())
    assert any(n.startswith("flow1") for n in full.params.names())
    assert not any(n.startswith("flow") for n in slim.params.names())
    with pytest.raises(ConfigError):
        FusionModel(TINY, sources=("rgb", "sonar"))
    with pytest.raises(ConfigError):
        FusionModel((8, 8), c_mid=6)


def test_stage2_loss_values(rng):
    mask = (rng.uniform(size=(1, 1, 16, 16)) > 0.5).astype(np.float64)
    assert float(stage2_loss(Tensor(mask.copy()), Tensor(mask)).data) <= 1e-6
    half = Tensor(np.full((1, 1, 16, 16), 0.5))
    assert float(stage2_loss(half, Tensor(mask)).data) == pytest.approx(np.log(2.0))


def test_loss_gradient_reaches_attention_parameters(rng):
    _, x, up = _upstream(rng, side=32)
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    flow_rgb = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    gt = Tensor((rng.uniform(size=(1, 1, 32, 32)) > 0.8).astype(np.float64))
    backward(stage2_loss(fusion_forward(fusion, x, flow_rgb, up), gt))
    for name in ("isam3.op.att.w", "isam1.rgb.mix.w", "fpm5.exclu.w", "flow2.conv.w"):
        assert np.abs(fusion.params[name].grad).max() > 0.0, name


def test_checkpoint_round_trip(tmp_path, rng):
    _, x, up = _upstream(rng, side=32)
    fusion = FusionModel(TINY, c_mid=6, sources=("rgb", "op"), use_isam=True,
                         use_fpm=False, rng=rng)
    flow_rgb = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    want = fusion_forward(fusion, x, flow_rgb, up).data
    save_stage2(tmp_path / "s2.ckpt", fusion)
    back = load_stage2(tmp_path / "s2.ckpt")
    assert back.sources == ("rgb", "op")
    assert back.use_isam and not back.use_fpm
    np.testing.assert_array_equal(fusion_forward(back, x, flow_rgb, up).data, want)


def test_checkpoint_missing_meta(tmp_path, rng):
    fusion = FusionModel(TINY, c_mid=6, rng=rng)
    from zvos.fileio import save_checkpoint
    save_checkpoint(tmp_path / "bad.ckpt", 2, fusion.params.state())  # no meta records
    with pytest.raises(ContractError):
        load_stage2(tmp_path / "bad.ckpt")


def test_overfits_one_sequence():
    gen = GeneratorConfig(height=64, width=64, frames=3)
    sample = generate_sequence(gen, seed=6)
    upstream = MultiTaskModel(TINY, rng=np.random.default_rng(1))
    upstream.freeze()
    x = Tensor(sample.frames)
    up = multitask_forward(upstream, x)
    flow_rgb = Tensor(np.stack([flow_to_color(sample.flows[min(t, 1)])
                                for t in range(3)]))
    gt = Tensor(sample.masks.astype(np.float64))
    fusion = FusionModel(TINY, c_mid=8, rng=np.random.default_rng(2))
    sgd = SGD(fusion.params.trainable(), momentum=0.9, weight_decay=0.0, clip_norm=1.0)
    done = False
    for step in range(500):
        pred = fusion_forward(fusion, x, flow_rgb, up)
        j = np.mean([region_j(pred.data[t, 0], gt.data[t, 0]) for t in range(3)])
        if j >= 0.9:
            done = True
            break
        loss = stage2_loss(pred, gt)
        backward(loss)
        sgd.step(0.05)
        sgd.zero_grad()
    assert done, f"after 500 steps mean J={j:.3f}"
