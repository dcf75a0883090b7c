"""Synthetic generator: exact ground truth, corruption modes, flow rendering."""

import colorsys

import numpy as np
import pytest

from zvos.dataset import read_sample, write_sample
from zvos.errors import ConfigError, DimensionError
from zvos.synth import (GeneratorConfig, corrupt_flow, flow_to_color,
                        generate_sequence)

from oracles import box_blur3_loops, hsv_wheel_color

SMALL = GeneratorConfig(height=32, width=32, frames=4)
ONE_OBJECT = GeneratorConfig(height=32, width=32, frames=4, max_objects=1)


def _flow_constants(sample):
    """Recover (velocity uv, drift uv) from a one-object uncorrupted sample."""
    inside = sample.masks[0, 0] > 0
    u, v = sample.flows[0]
    velocity = np.array([u[inside][0], v[inside][0]])
    drift = np.array([u[~inside][0], v[~inside][0]])
    return velocity, drift


# ------------------------------------------------------------ ground truth


def test_generation_is_deterministic():
    a = generate_sequence(SMALL, seed=11)
    b = generate_sequence(SMALL, seed=11)
    for field in ("frames", "masks", "depths", "flows"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert generate_sequence(SMALL, seed=12).frames.tobytes() != a.frames.tobytes()


def test_array_shapes_and_ranges():
    s = generate_sequence(SMALL, seed=3)
    assert s.frames.shape == (4, 3, 32, 32)
    assert s.masks.shape == (4, 1, 32, 32)
    assert s.depths.shape == (4, 1, 32, 32)
    assert s.flows.shape == (3, 2, 32, 32)
    assert s.flows.dtype == np.float32
    assert s.frames.min() >= 0.0 and s.frames.max() <= 1.0
    assert set(np.unique(s.masks)) <= {0, 1}
    assert s.depths.min() >= 0.0 and s.depths.max() <= 1.0


def test_flow_is_velocity_inside_and_drift_outside():
    for seed in range(5):
        s = generate_sequence(ONE_OBJECT, seed=seed)
        velocity, drift = _flow_constants(s)
        for t in range(s.flows.shape[0]):
            inside = s.masks[t, 0] > 0
            u, v = s.flows[t]
            assert np.all(u[inside] == velocity[0]) and np.all(v[inside] == velocity[1])
            assert np.all(u[~inside] == drift[0]) and np.all(v[~inside] == drift[1])
        # integer speeds within the configured band, clearly above the drift
        assert float(velocity[0]) == int(velocity[0])
        assert ONE_OBJECT.min_speed <= np.abs(velocity).max() <= ONE_OBJECT.max_speed
        assert np.abs(drift).max() <= ONE_OBJECT.max_drift


def test_mask_displacement_matches_flow():
    # the mask's centroid moves by exactly the advertised velocity
    s = generate_sequence(ONE_OBJECT, seed=2)
    velocity, _ = _flow_constants(s)
    for t in range(s.flows.shape[0]):
        c0 = np.argwhere(s.masks[t, 0]).mean(axis=0)      # (y, x)
        c1 = np.argwhere(s.masks[t + 1, 0]).mean(axis=0)
        np.testing.assert_allclose(c1 - c0, [velocity[1], velocity[0]], atol=1e-9)


def test_mask_area_constant_across_frames():
    for seed in range(4):
        s = generate_sequence(SMALL, seed=seed)
        areas = s.masks.sum(axis=(1, 2, 3))
        assert np.all(areas == areas[0]) and areas[0] > 0


def test_depth_separates_objects_from_background():
    for seed in range(4):
        s = generate_sequence(SMALL, seed=seed)
        for t in range(s.frames.shape[0]):
            inside = s.masks[t, 0] > 0
            assert s.depths[t, 0][inside].min() > s.depths[t, 0][~inside].max()


def _warp_next_to_current(next_frame, flow):
    """Bilinear sample of frame t+1 at (x + u, y + v)."""
    _, h, w = next_frame.shape
    ys = np.arange(h)[:, None] + flow[1].astype(np.float64)
    xs = np.arange(w)[None, :] + flow[0].astype(np.float64)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    return (next_frame[:, y0c, x0c] * (1 - fy) * (1 - fx)
            + next_frame[:, y0c, x1c] * (1 - fy) * fx
            + next_frame[:, y1c, x0c] * fy * (1 - fx)
            + next_frame[:, y1c, x1c] * fy * fx)


def test_warping_by_flow_is_consistent_inside_mask():
    for seed in range(4):
        s = generate_sequence(SMALL, seed=seed)
        for t in range(s.flows.shape[0]):
            warped = _warp_next_to_current(s.frames[t + 1], s.flows[t])
            inside = s.masks[t, 0] > 0
            assert np.abs(warped - s.frames[t]).max(axis=0)[inside].max() <= 0.1


# -------------------------------------------------------------- corruption


def _corrupted_twin(mode, strength, seed=7):
    cfg = GeneratorConfig(height=32, width=32, frames=4, max_objects=1,
                          corruption=mode, corruption_strength=strength)
    clean = generate_sequence(ONE_OBJECT, seed=seed)
    return clean, generate_sequence(cfg, seed=seed)


@pytest.mark.parametrize("mode,strength", [("zero-object", 0.0),
                                           ("background-dominant", 6.0),
                                           ("noise", 2.0)])
def test_corruption_touches_only_flow(mode, strength):
    clean, bad = _corrupted_twin(mode, strength)
    np.testing.assert_array_equal(clean.frames, bad.frames)
    np.testing.assert_array_equal(clean.masks, bad.masks)
    np.testing.assert_array_equal(clean.depths, bad.depths)
    assert bad.flows.tobytes() != clean.flows.tobytes()
    assert bad.flow_quality == mode


def test_zero_object_endpoint_error_is_velocity_minus_drift():
    clean, bad = _corrupted_twin("zero-object", 0.0)
    velocity, drift = _flow_constants(clean)
    for t in range(clean.flows.shape[0]):
        inside = clean.masks[t, 0] > 0
        u, v = bad.flows[t]
        assert np.all(u[inside] == drift[0]) and np.all(v[inside] == drift[1])
        epe = np.hypot(*(bad.flows[t] - clean.flows[t]).astype(np.float64))
        expected = np.hypot(*(velocity - drift))
        assert epe[inside].mean() == pytest.approx(expected, abs=1e-6)
        assert np.all(epe[~inside] == 0.0)


def test_background_dominant_adds_one_sequence_wide_vector():
    strength = 6.0
    clean, bad = _corrupted_twin("background-dominant", strength)
    deltas = (bad.flows - clean.flows).astype(np.float64)
    per_frame = deltas.reshape(deltas.shape[0], 2, -1)
    assert np.abs(per_frame - per_frame[:, :, :1]).max() <= 1e-5   # constant per frame
    assert np.abs(per_frame[:, :, 0] - per_frame[0, :, 0]).max() <= 1e-5  # shared by all
    assert np.hypot(*per_frame[0, :, 0]) == pytest.approx(strength, rel=1e-5)


def test_corrupt_flow_identity_modes(rng):
    flow = rng.uniform(-3, 3, size=(2, 16, 16)).astype(np.float32)
    mask = np.zeros((16, 16))
    mask[4:9, 5:10] = 1
    np.testing.assert_array_equal(corrupt_flow(flow, mask, "none", 0.0, 1), flow)
    np.testing.assert_array_equal(corrupt_flow(flow, mask, "noise", 0.0, 1), flow)


def test_corrupt_flow_rejects_bad_input(rng):
    flow = rng.uniform(size=(2, 8, 8)).astype(np.float32)
    mask = np.zeros((8, 8))
    with pytest.raises(ConfigError):
        corrupt_flow(flow, mask, "melt", 1.0, 0)
    with pytest.raises(DimensionError):
        corrupt_flow(flow[0], mask, "noise", 1.0, 0)


def test_noise_magnitude_matches_monte_carlo_oracle():
    # blur(flow + noise) - flow == blur(noise) on a constant field, so the
    # observed deviation must match an independently simulated E|blur(noise)|
    strength = 2.0
    flow = np.full((2, 16, 16), 1.5, dtype=np.float32)
    mask = np.zeros((16, 16))
    trials = 150
    observed = np.mean([
        np.abs(corrupt_flow(flow, mask, "noise", strength, 1000 + k).astype(np.float64)
               - flow.astype(np.float64)).mean()
        for k in range(trials)])
    sim_rng = np.random.default_rng(99)
    simulated = np.mean([
        np.abs(box_blur3_loops(sim_rng.normal(0.0, strength, size=flow.shape))).mean()
        for _ in range(trials)])
    assert observed == pytest.approx(simulated, rel=0.10)


# ----------------------------------------------------------- flow rendering


def test_flow_to_color_zero_flow_is_mid_gray():
    img = flow_to_color(np.zeros((2, 8, 8), dtype=np.float32))
    np.testing.assert_allclose(img, 0.5, atol=1e-12)


def test_flow_to_color_constant_flow_matches_colorsys():
    for u, v in ((1.0, 0.0), (0.0, -2.0), (-1.5, 1.5), (3.0, 4.0)):
        img = flow_to_color(np.stack([np.full((4, 4), u), np.full((4, 4), v)]))
        expected = hsv_wheel_color(u, v, peak=np.hypot(u, v))
        for c in range(3):
            np.testing.assert_allclose(img[c], expected[c], atol=1e-9)


def test_flow_to_color_matches_colorsys_per_pixel(rng):
    flow = rng.uniform(-5, 5, size=(2, 6, 7))
    img = flow_to_color(flow)
    peak = np.hypot(flow[0], flow[1]).max()
    for y in range(6):
        for x in range(7):
            expected = hsv_wheel_color(flow[0, y, x], flow[1, y, x], peak)
            np.testing.assert_allclose(img[:, y, x], expected, atol=1e-9)


def test_flow_to_color_rotation_by_pi_flips_hue(rng):
    flow = rng.uniform(0.5, 3.0, size=(2, 5, 5)) * rng.choice([-1, 1], size=(2, 5, 5))
    a, b = flow_to_color(flow), flow_to_color(-flow)
    for y in range(5):
        for x in range(5):
            ha, sa, va = colorsys.rgb_to_hsv(*a[:, y, x])
            hb, sb, vb = colorsys.rgb_to_hsv(*b[:, y, x])
            assert min(abs(ha - hb), 1 - abs(ha - hb)) == pytest.approx(0.5, abs=1e-6)
            assert sa == pytest.approx(sb, abs=1e-9)
            assert va == pytest.approx(vb, abs=1e-9)


def test_flow_to_color_rejects_bad_shape():
    with pytest.raises(DimensionError):
        flow_to_color(np.zeros((3, 4, 4)))


# ------------------------------------------------------------ configuration


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(height=33).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(frames=1).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(min_objects=0).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(shapes=("hexagon",)).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(min_speed=4, max_speed=3).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(corruption="smear").validate()


def test_impossible_path_raises():
    # a 32 px frame cannot host a 31-frame path at >= 2 px/frame
    cfg = GeneratorConfig(height=32, width=32, frames=31)
    with pytest.raises(ConfigError):
        generate_sequence(cfg, seed=0)


# ----------------------------------------------------------- sample on disk


def test_sample_round_trip_through_directory(tmp_path):
    cfg = GeneratorConfig(height=32, width=32, frames=3, corruption="noise",
                          corruption_strength=1.5)
    sample = generate_sequence(cfg, seed=4, seq_id="seq_road")
    write_sample(sample, tmp_path / "seq_road", cfg)
    back = read_sample(tmp_path / "seq_road")
    assert back.seq_id == "seq_road"
    assert back.seed == sample.seed
    assert back.flow_quality == "noise"
    assert back.corruption_strength == 1.5
    np.testing.assert_array_equal(back.masks, sample.masks)
    np.testing.assert_array_equal(back.flows, sample.flows)
    assert np.abs(back.frames - sample.frames).max() <= 0.5 / 255.0 + 1e-12
    assert np.abs(back.depths - sample.depths).max() <= 0.5 / 65535.0 + 1e-12
