import numpy as np
import pytest

from filsynth.nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    init_params,
    param_shapes,
    sample_noise,
    truncated_normal,
)
from filsynth.tensor_core import Tensor, backward, tsum
from filsynth.trainer import TrainConfig

from oracles import TRUNCNORM_STD


@pytest.fixture(scope="module")
def desk():
    g = GeneratorConfig.desk(32)
    d = DiscriminatorConfig.desk(32)
    return init_params(g, 0), init_params(d, 1)


def _inputs(size, z_dim, seed=0):
    rng = np.random.default_rng(seed)
    y = Tensor(np.where(rng.uniform(size=(1, size, size)) > 0.8, 1.0, -1.0))
    return y, sample_noise(z_dim, 1.0, rng)


# -------------------------------------------------------------------- init

def test_init_values_inside_truncation_interval():
    w = truncated_normal(np.random.default_rng(0), (200_000,))
    assert np.abs(w).max() <= 0.04


def test_init_std_matches_truncated_normal_oracle():
    s = float(truncated_normal(np.random.default_rng(1), (200_000,)).std())
    assert abs(s - TRUNCNORM_STD) < 3e-4
    assert 0.0195 - 0.002 <= s <= 0.0195 + 0.002


def test_init_is_deterministic_and_biases_zero(desk):
    again = init_params(GeneratorConfig.desk(32), 0)
    gen, _ = desk
    for name, t in gen.items():
        assert t.data.tobytes() == again[name].data.tobytes()
        if name.endswith("/bias") or name.endswith("/bn_beta"):
            assert not t.data.any()
        if name.endswith(("/kernel", "/weight")):
            assert np.abs(t.data).max() <= 0.04


# --------------------------------------------------------------- generator

def test_generator_output_shape_range_and_determinism(desk):
    gen, _ = desk
    y, z = _inputs(32, gen.config.z_dim)
    a = generator_forward(gen, y, z, "infer")
    b = generator_forward(gen, y, z, "infer")
    assert a.shape == (3, 32, 32)
    assert np.abs(a.data).max() <= 1
    assert a.data.tobytes() == b.data.tobytes()


def test_generator_different_noise_differs(desk):
    gen, _ = desk
    y, _ = _inputs(32, gen.config.z_dim)
    rng = np.random.default_rng(5)
    a = generator_forward(gen, y, sample_noise(gen.config.z_dim, 1.0, rng), "infer")
    b = generator_forward(gen, y, sample_noise(gen.config.z_dim, 1.0, rng), "infer")
    assert np.abs(a.data - b.data).mean() > 0


@pytest.mark.parametrize("size", [16, 32, 64])
def test_encoder_halves_decoder_mirrors(size):
    cfg = GeneratorConfig.desk(size)
    gen = init_params(cfg, 0)
    y, z = _inputs(size, cfg.z_dim)
    trace = []
    generator_forward(gen, y, z, "train", trace)
    enc = [s for kind, _, s in trace if kind == "enc"]
    dec = [s for kind, _, s in trace if kind == "dec"]
    assert [s[1] for s in enc] == [size >> (i + 1) for i in range(cfg.depth)]
    assert [s[1] for s in dec] == [size >> i for i in range(cfg.depth - 1, -1, -1)]
    assert [s[0] for s in enc] == cfg.encoder_filters


def test_generator_rejects_size_mismatch(desk):
    gen, _ = desk
    y, z = _inputs(16, gen.config.z_dim)
    with pytest.raises(ValueError, match="expects"):
        generator_forward(gen, y, z)


def test_skip_flag_changes_output():
    a_cfg = GeneratorConfig.desk(16)
    b_cfg = GeneratorConfig.desk(16, skips=False)
    y, z = _inputs(16, a_cfg.z_dim)
    a = generator_forward(init_params(a_cfg, 0), y, z, "infer")
    b = generator_forward(init_params(b_cfg, 0), y, z, "infer")
    assert a.shape == b.shape
    assert not np.array_equal(a.data, b.data)


def test_encoder_gets_gradient_through_skips_alone():
    cfg = GeneratorConfig.desk(16)
    gen = init_params(cfg, 0)
    deepest = f"dec{cfg.depth - 1}/kernel"
    gen[deepest].data[...] = 0  # cut the bottleneck path
    y, z = _inputs(16, cfg.z_dim)
    backward(tsum(generator_forward(gen, y, z, "train")), params=gen.values())
    assert gen[deepest].grad is not None
    assert np.abs(gen["enc0/kernel"].grad).sum() > 0


def test_noise_concat_at_full_scale_bottleneck():
    cfg = GeneratorConfig.full()
    assert cfg.bottleneck_size == 8
    assert cfg.encoder_filters[-1] + cfg.noise_maps == 768
    assert cfg.z_dim == 400


def test_noise_at_input_variant_runs():
    cfg = GeneratorConfig.desk(16, noise_at="input")
    gen = init_params(cfg, 0)
    y, z = _inputs(16, cfg.z_dim)
    assert generator_forward(gen, y, z).shape == (3, 16, 16)


# ----------------------------------------------------------- discriminator

def test_discriminator_output_in_open_unit_interval(desk):
    gen, disc = desk
    y, z = _inputs(32, gen.config.z_dim)
    x = generator_forward(gen, y, z, "infer")
    p1 = discriminator_forward(disc, x, y, "infer")
    p2 = discriminator_forward(disc, x, y, "infer")
    assert p1.shape == ()
    assert 0 < p1.item() < 1
    assert p1.item() == p2.item()


def test_discriminator_rejects_bad_shapes(desk):
    _, disc = desk
    with pytest.raises(ValueError):
        discriminator_forward(disc, Tensor(np.zeros((3, 16, 16))), Tensor(np.zeros((1, 16, 16))))
    with pytest.raises(ValueError):
        discriminator_forward(disc, Tensor(np.zeros((2, 32, 32))), Tensor(np.zeros((1, 32, 32))))


def test_full_scale_filter_progression():
    assert DiscriminatorConfig.full().filters == [32, 64, 128, 256, 512]
    assert GeneratorConfig.full().encoder_filters == [32, 64, 128, 256, 512, 512]


@pytest.mark.parametrize("cfg", [GeneratorConfig.full(), GeneratorConfig.desk(64),
                                 DiscriminatorConfig.full(), DiscriminatorConfig.desk(64)],
                         ids=["gen-full", "gen-desk", "disc-full", "disc-desk"])
def test_no_batch_norm_on_g_output_or_d_input(cfg):
    names = set(param_shapes(cfg))
    if isinstance(cfg, GeneratorConfig):
        assert "dec0/bn_gamma" not in names and "dec0/bn_beta" not in names
        assert param_shapes(cfg)["dec0/kernel"][1] == 3
    else:
        assert "conv0/bn_gamma" not in names and "conv0/bn_beta" not in names
        assert param_shapes(cfg)["conv0/kernel"][1] == 4


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        GeneratorConfig(image_size=48).validate()
    with pytest.raises(ValueError):
        GeneratorConfig.desk(16, depth=3).validate()
    with pytest.raises(ValueError):
        GeneratorConfig.desk(16, noise_at="middle").validate()


# ------------------------------------------------------------------- noise

def test_noise_default_stds():
    cfg = TrainConfig()
    assert cfg.noise_std_train == 0.001
    assert cfg.noise_std_test == 1.0


@pytest.mark.parametrize("std", [0.001, 1.0])
def test_noise_mean_monte_carlo(std):
    z = sample_noise(100_000, std, np.random.default_rng(0)).data
    assert abs(z.mean()) <= 0.02 * std
    assert abs(z.std() / std - 1) < 0.01


def test_noise_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        sample_noise(4, 0.0, np.random.default_rng(0))


# ------------------------------------------------------------------ params

def test_params_array_round_trip(desk):
    gen, _ = desk
    y, z = _inputs(32, gen.config.z_dim)
    generator_forward(gen, y, z, "train")  # moves running stats
    arrays = gen.to_arrays("g/")
    fresh = init_params(gen.config, 99)
    fresh.load_arrays(arrays, "g/")
    for name in gen:
        assert np.array_equal(gen[name].data, fresh[name].data)
    for name in gen.buffers:
        assert np.array_equal(gen.buffers[name].mean, fresh.buffers[name].mean)
    arrays.pop("g/enc0/kernel")
    with pytest.raises(ValueError, match="enc0/kernel"):
        fresh.load_arrays(arrays, "g/")
