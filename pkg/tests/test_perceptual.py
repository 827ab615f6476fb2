import numpy as np
import pytest

from filsynth import checkpoint
from filsynth.losses import style_loss
from filsynth.perceptual import (
    DESK_BLOCKS,
    FeatureNetConfig,
    build_feature_net,
    extract_features,
    feature_param_count,
    save_feature_net,
)
from filsynth.tensor_core import Tensor, backward, tsum


@pytest.fixture(scope="module")
def net():
    return build_feature_net(FeatureNetConfig(), seed=0)


def test_defaults():
    cfg = FeatureNetConfig()
    assert len(cfg.blocks) == 5
    assert cfg.blocks == DESK_BLOCKS
    assert set(cfg.style_selection) == {(1, 1), (2, 1), (3, 1), (4, 1), (5, 1)}
    assert set(cfg.content_selection) == {(4, 2)}


def test_same_seed_bit_identical(net):
    again = build_feature_net(FeatureNetConfig(), seed=0)
    assert all(net[k].data.tobytes() == again[k].data.tobytes() for k in net)


def test_parameter_count_closed_form(net):
    total, c_in = 0, 3
    for n, c in FeatureNetConfig().blocks:
        for _ in range(n):
            total += 3 * 3 * c_in * c + c
            c_in = c
    assert net.num_parameters() == total == feature_param_count(net.config)


def test_gradient_reaches_input_but_not_weights(net):
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (3, 32, 32)), requires_grad=True)
    feats = extract_features(net, x, [(3, 1)])
    backward(tsum(feats[(3, 1)]))
    assert np.abs(x.grad).sum() > 0
    assert all(t.grad is None and not t.requires_grad for t in net.values())


def test_selection_shapes(net):
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, (3, 64, 64)))
    f = extract_features(net, x, [(1, 1)])
    assert list(f) == [(1, 1)] and f[(1, 1)].shape == (8, 64, 64)
    f = extract_features(net, x, [(4, 2)])
    assert f[(4, 2)].shape[1:] == (8, 8)
    again = extract_features(net, x, [(4, 2)])
    assert f[(4, 2)].data.tobytes() == again[(4, 2)].data.tobytes()


def test_spatial_dims_halve_per_block(net):
    x = Tensor(np.zeros((3, 64, 64)))
    feats = extract_features(net, x, [(b, 1) for b in range(1, 6)])
    assert [feats[(b, 1)].shape[1] for b in range(1, 6)] == [64, 32, 16, 8, 4]


def test_bad_selection_and_size_rejected(net):
    with pytest.raises(ValueError):
        extract_features(net, Tensor(np.zeros((3, 64, 64))), [(6, 1)])
    with pytest.raises(ValueError):
        extract_features(net, Tensor(np.zeros((3, 48, 40))), [(1, 1)])
    with pytest.raises(ValueError):
        FeatureNetConfig(style_selection=((1, 3),)).validate()


def test_weights_file_round_trip_and_errors(net, tmp_path):
    path = tmp_path / "feat.fstc"
    save_feature_net(net, path)
    loaded = build_feature_net(FeatureNetConfig(weights_source="file", weights_path=str(path)))
    assert all(np.array_equal(net[k].data, loaded[k].data) for k in net)
    with pytest.raises((OSError, checkpoint.CheckpointError)):
        build_feature_net(FeatureNetConfig(weights_source="file", weights_path=str(tmp_path / "missing")))
    path.write_bytes(path.read_bytes()[:50])
    with pytest.raises(checkpoint.CheckpointError):
        build_feature_net(FeatureNetConfig(weights_source="file", weights_path=str(path)))
    small = FeatureNetConfig(blocks=((1, 4),) * 5, content_selection=((4, 1),),
                             weights_source="file", weights_path=str(tmp_path / "s.fstc"))
    save_feature_net(net, small.weights_path)
    with pytest.raises(checkpoint.CheckpointError):
        build_feature_net(small)


def test_style_loss_separates_shuffled_textures(net):
    rng = np.random.default_rng(0)
    from scipy import ndimage
    img = ndimage.gaussian_filter(rng.normal(size=(3, 64, 64)), (0, 2, 2))
    img = np.clip(img / np.abs(img).max(), -1, 1)
    shuffled = img.reshape(3, -1)[:, rng.permutation(64 * 64)].reshape(3, 64, 64)
    sel = net.config.style_selection
    f_img = extract_features(net, Tensor(img), sel)
    same = style_loss(f_img, extract_features(net, Tensor(img.copy()), sel)).item()
    diff = style_loss(f_img, extract_features(net, Tensor(shuffled), sel)).item()
    assert same == 0 < diff
