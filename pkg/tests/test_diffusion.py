import math

import numpy as np
import pytest

from geodiffnet.diffusion import (DECODER_TABLE, DiffusionFeatureExtractor, NoiseSchedule, UNetConfig,
                                  WeightFormatError, build_schedule, extract_features,
                                  extract_multi, forward_noise, init_frozen_unet,
                                  load_unet_weights, patch_rng, save_unet_weights)
from geodiffnet.exceptions import ConfigError

# (resolution, channels) per decoder layer at full width and 64x64 input
TABLE = [(8, 768), (8, 768), (16, 768), (16, 576), (16, 576), (16, 576),
         (32, 576), (32, 384), (32, 384), (32, 384), (64, 384), (64, 192)]


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_is_strictly_decreasing_from_one(kind):
    s = build_schedule(1000, kind)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] > 0
    assert s.T == 1000


def test_linear_schedule_values():
    s = build_schedule(1000, "linear")
    assert s[1] == pytest.approx(0.9999, abs=1e-12)
    betas = np.linspace(1e-4, 0.02, 1000)
    assert s[1000] == pytest.approx(np.prod(1 - betas), rel=1e-10)


def test_cosine_schedule_matches_closed_form_early():
    s = build_schedule(1000, "cosine")
    f = lambda t: math.cos((t / 1000 + 0.008) / 1.008 * math.pi / 2) ** 2
    # far from the floor mapping the table tracks f(t)/f(0) closely
    for t in (10, 100, 500):
        assert s[t] == pytest.approx(f(t) / f(0), rel=1e-3)


def test_unknown_schedule():
    with pytest.raises(ConfigError):
        build_schedule(1000, "quadratic")


def test_forward_noise_t0_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, (4, 4, 3))
    out = forward_noise(x, 0, build_schedule(), np.random.default_rng(1))
    assert out.tobytes() == x.tobytes()


def test_forward_noise_example():
    # abar = 0.25, x0 = 2, eps = 1 gives 0.5 * 2 + sqrt(0.75)
    s = NoiseSchedule(np.array([1.0, 0.25]), "custom")
    out = forward_noise(np.array([2.0]), 1, s, noise=np.array([1.0]))
    assert out[0] == pytest.approx(1.86603, abs=1e-5)


@pytest.mark.parametrize("t", [50, 500, 999])
def test_forward_noise_moments(t):
    s = build_schedule()
    x0 = np.full(200_000, 0.6)
    xt = forward_noise(x0, t, s, np.random.default_rng(t))
    ab = s[t]
    se = math.sqrt((1 - ab) / x0.size)
    assert abs(xt.mean() - math.sqrt(ab) * 0.6) < 5 * se
    assert xt.var() == pytest.approx(1 - ab, rel=0.02)


def test_forward_noise_out_of_range():
    with pytest.raises(ConfigError):
        forward_noise(np.zeros(2), 1001, build_schedule(), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        forward_noise(np.zeros(2), -1, build_schedule(), np.random.default_rng(0))


def test_patch_rng_is_deterministic():
    a = patch_rng(3, 7, 100).standard_normal(5)
    b = patch_rng(3, 7, 100).standard_normal(5)
    c = patch_rng(3, 8, 100).standard_normal(5)
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_decoder_table_constant():
    assert [(r, c) for r, c, _ in DECODER_TABLE] == TABLE
    assert [a for _, _, a in DECODER_TABLE] == [True] * 10 + [False] * 2


def test_all_layer_shapes(unet64):
    x = np.random.default_rng(0).uniform(-1, 1, (64, 64, 3)).astype(np.float32)
    acts = unet64.forward(x, 10)
    assert sorted(acts) == list(range(1, 13))
    for layer, (res, ch) in enumerate(TABLE, start=1):
        assert acts[layer].shape == (res, res, ch // 8)
        assert unet64.config.layer_shape(layer) == (res, res, ch // 8)
        assert np.all(np.isfinite(acts[layer]))


def test_channel_scale_must_divide():
    with pytest.raises(ConfigError):
        UNetConfig(channel_scale=7)
    with pytest.raises(ConfigError):
        UNetConfig(input_size=20)


def test_layer_range(small_unet):
    x = np.zeros((16, 16, 3), np.float32)
    with pytest.raises(ConfigError):
        small_unet.forward(x, 0, [13])
    with pytest.raises(ConfigError):
        small_unet.forward(x, 0, [0])


def test_forward_is_deterministic(small_unet):
    x = np.random.default_rng(1).uniform(-1, 1, (16, 16, 3))
    a = small_unet.forward(x, 5, [4, 9])
    b = small_unet.forward(x, 5, [4, 9])
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_partial_forward_matches_full(small_unet):
    x = np.random.default_rng(2).uniform(-1, 1, (16, 16, 3))
    full = small_unet.forward(x, 3)
    part = small_unet.forward(x, 3, [5])
    assert part[5].tobytes() == full[5].tobytes()


def test_features_at_top_layers_are_not_resampled(small_unet):
    s = build_schedule()
    x = np.random.default_rng(3).uniform(-1, 1, (16, 16, 3))
    for layer in (11, 12):
        f = extract_features(small_unet, x, 0, layer, s, patch_rng(0, 0, 0))
        raw = small_unet.forward(x, 0, [layer])[layer]
        assert f.tobytes() == raw.astype(np.float32).tobytes()


def test_low_layers_are_upsampled_to_patch(small_unet):
    s = build_schedule()
    x = np.random.default_rng(4).uniform(-1, 1, (16, 16, 3))
    f = extract_multi(small_unet, x, 100, [2, 7, 11], s, patch_rng(0, 0, 100))
    assert f[2].shape == (16, 16, 96) and f[7].shape == (16, 16, 72) and f[11].shape == (16, 16, 48)


def test_multi_layer_tap_shares_noise(small_unet):
    s = build_schedule()
    x = np.random.default_rng(5).uniform(-1, 1, (16, 16, 3))
    both = extract_multi(small_unet, x, 200, [3, 10], s, patch_rng(1, 2, 200))
    single = extract_features(small_unet, x, 200, 10, s, patch_rng(1, 2, 200))
    assert both[10].tobytes() == single.tobytes()


def test_patch_range_checked(small_unet):
    with pytest.raises(ConfigError):
        extract_features(small_unet, np.full((16, 16, 3), 2.0), 0, 11, build_schedule(), patch_rng(0, 0, 0))


def test_weights_are_read_only(small_unet):
    name = next(iter(small_unet.params))
    with pytest.raises(ValueError):
        small_unet.params[name][...] = 0


def test_extraction_leaves_weights_unchanged(small_unet):
    before = small_unet.checksum()
    s = build_schedule()
    x = np.random.default_rng(6).uniform(-1, 1, (16, 16, 3))
    extract_multi(small_unet, x, 500, range(1, 13), s, patch_rng(0, 0, 500))
    assert small_unet.checksum() == before


def test_weight_roundtrip(tmp_path, small_unet):
    p = tmp_path / "u.weights"
    save_unet_weights(small_unet, p)
    back = load_unet_weights(p)
    assert back.config == small_unet.config
    assert back.checksum() == small_unet.checksum()


def test_weight_config_mismatch(tmp_path, small_unet):
    p = tmp_path / "u.weights"
    save_unet_weights(small_unet, p)
    with pytest.raises(WeightFormatError):
        load_unet_weights(p, UNetConfig(input_size=16, channel_scale=16))


def test_truncated_weights(tmp_path, small_unet):
    p = tmp_path / "u.weights"
    save_unet_weights(small_unet, p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(WeightFormatError) as err:
        load_unet_weights(p)
    assert err.value.offset is not None


def test_init_seed_controls_weights():
    cfg = UNetConfig(input_size=8, channel_scale=16)
    assert init_frozen_unet(cfg, 1).checksum() == init_frozen_unet(cfg, 1).checksum()
    assert init_frozen_unet(cfg, 1).checksum() != init_frozen_unet(cfg, 2).checksum()


def test_feature_extractor_estimator():
    est = DiffusionFeatureExtractor(layer=11, timestep=50, input_size=16, seed=3).fit()
    X = np.random.default_rng(0).uniform(-1, 1, (3, 16, 16, 3))
    out = est.transform(X)
    assert out.shape == (3, 16, 16, 48)
    # batch order does not change a sample's features when ids travel with it
    rev = est.transform(X[::-1], patch_ids=[2, 1, 0])
    np.testing.assert_array_equal(rev[::-1], out)
    assert est.get_params()["layer"] == 11
