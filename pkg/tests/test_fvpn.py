import numpy as np
import pytest

from dave.errors import LabelError, ShapeError
from dave.fvpn import FVPN, FvpnConfig, FvpnTarget, cell_to_window, fvpn_forward, fvpn_loss
from dave.optim import SGD
from dave.tensor import Tensor, float64_mode, grad_check


def make_fvpn(cfg, seed=0):
    with float64_mode():
        return FVPN(cfg, seed=seed)


def images64(rng, shape):
    with float64_mode():
        return Tensor(rng.uniform(size=shape))


def target(rng, is_vehicle, knowledge_dim):
    pos = np.asarray(is_vehicle)
    loc = np.where(pos[:, None] == 1, rng.uniform(0.1, 0.9, size=(pos.size, 4)), 0.0)
    return FvpnTarget(is_vehicle=pos, loc_t=loc, t_know=rng.uniform(size=(pos.size, knowledge_dim)))


def test_geometry_and_heatmap_extent(tiny_fvpn_config):
    assert tiny_fvpn_config.stride == 4
    assert tiny_fvpn_config.heatmap_extent(60, 60) == (1, 1)
    assert tiny_fvpn_config.heatmap_extent(200, 200) == (36, 36)
    assert tiny_fvpn_config.heatmap_extent(64, 68) == (2, 3)


def test_config_rejects_head_kernel_mismatch():
    with pytest.raises(ShapeError):
        FvpnConfig(head_kernel=9)


def test_input_smaller_than_receptive_field(tiny_fvpn_config):
    with pytest.raises(ShapeError):
        FVPN(tiny_fvpn_config)(Tensor(np.zeros((1, 3, 59, 80))))


def test_head_shapes_and_ranges(rng, tiny_fvpn_config):
    net = FVPN(tiny_fvpn_config, seed=1)
    heads = fvpn_forward(Tensor(rng.uniform(size=(2, 3, 68, 64))), net)
    assert heads.extent == (3, 2)
    assert heads.class_map.shape == (2, 2, 3, 2)
    assert heads.bbr_map.shape == (2, 4, 3, 2)
    assert heads.knowledge_map.shape == (2, tiny_fvpn_config.knowledge_dim, 3, 2)
    np.testing.assert_allclose(heads.class_map.data.sum(axis=1), 1.0, atol=1e-5)
    assert np.all((heads.bbr_map.data >= 0) & (heads.bbr_map.data <= 1))


def test_fully_convolutional_equivalence(rng, tiny_fvpn_config):
    net = make_fvpn(tiny_fvpn_config, seed=2)
    image = rng.uniform(size=(1, 3, 200, 200))
    with float64_mode():
        full = net(Tensor(image))
    cells = rng.integers(0, 36, size=(50, 2))
    crops = np.concatenate([image[:, :, 4 * r:4 * r + 60, 4 * c:4 * c + 60] for r, c in cells], axis=0)
    with float64_mode():
        per_crop = net(Tensor(crops))
    for i, (r, c) in enumerate(cells):
        np.testing.assert_allclose(full.class_map.data[0, :, r, c], per_crop.class_map.data[i, :, 0, 0], atol=1e-5)
        np.testing.assert_allclose(full.bbr_map.data[0, :, r, c], per_crop.bbr_map.data[i, :, 0, 0], atol=1e-5)
        np.testing.assert_allclose(
            full.knowledge_map.data[0, :, r, c], per_crop.knowledge_map.data[i, :, 0, 0], atol=1e-5
        )


@pytest.mark.parametrize("seed", range(20))
def test_composite_loss_gradients(seed, tiny_fvpn_config):
    r = np.random.default_rng(seed)
    net = make_fvpn(tiny_fvpn_config, seed=seed)
    tgt = target(r, r.integers(0, 2, size=3), tiny_fvpn_config.knowledge_dim)
    images = images64(r, (3, 3, 60, 60))

    def loss_of_images(inp):
        return fvpn_loss(net(inp), tgt, tiny_fvpn_config)[0]

    def loss_of_bbr_head(_inp):
        return fvpn_loss(net(images), tgt, tiny_fvpn_config)[0]

    assert grad_check(loss_of_images, images, samples=20, rng=r) <= 1e-4
    assert grad_check(loss_of_bbr_head, net.params["fvpn/head_bbr.w"], samples=20, rng=r) <= 1e-4


def test_background_batch_leaves_bbr_head_untouched(rng, tiny_fvpn_config):
    net = FVPN(tiny_fvpn_config, seed=4)
    tgt = target(rng, np.zeros(4, dtype=np.int64), tiny_fvpn_config.knowledge_dim)
    loss, parts = fvpn_loss(net(Tensor(rng.uniform(size=(4, 3, 60, 60)))), tgt, tiny_fvpn_config)
    loss.backward()
    assert parts["l_bbox_weighted"] == 0.0
    for name in ("fvpn/head_bbr.w", "fvpn/head_bbr.b"):
        grad = net.params[name].grad
        assert grad is None or not np.any(grad)
    assert np.any(net.params["fvpn/head_cls.w"].grad)
    assert np.any(net.params["fvpn/head_know.w"].grad)


def test_guidance_off_drops_knowledge_term(rng, tiny_fvpn_config):
    net = FVPN(tiny_fvpn_config, seed=4)
    tgt = FvpnTarget(is_vehicle=np.array([1, 0]), loc_t=np.array([[0.2, 0.2, 0.5, 0.5], [0, 0, 0, 0]]))
    loss, parts = fvpn_loss(net(Tensor(rng.uniform(size=(2, 3, 60, 60)))), tgt, tiny_fvpn_config, guidance=False)
    loss.backward()
    assert parts["l_know_weighted"] == 0.0
    grad = net.params["fvpn/head_know.w"].grad
    assert grad is None or not np.any(grad)


def test_guidance_needs_knowledge_target(rng, tiny_fvpn_config):
    net = FVPN(tiny_fvpn_config)
    tgt = FvpnTarget(is_vehicle=np.array([0]), loc_t=np.zeros((1, 4)))
    with pytest.raises(LabelError):
        fvpn_loss(net(Tensor(rng.uniform(size=(1, 3, 60, 60)))), tgt, tiny_fvpn_config)


def test_background_rows_must_have_zero_loc_target(tiny_fvpn_config):
    bad = FvpnTarget(is_vehicle=np.array([0]), loc_t=np.array([[0.1, 0.0, 0.0, 0.0]]))
    with pytest.raises(LabelError):
        bad.validate()


def test_loss_needs_one_by_one_heads(rng, tiny_fvpn_config):
    net = FVPN(tiny_fvpn_config)
    tgt = FvpnTarget(is_vehicle=np.array([0]), loc_t=np.zeros((1, 4)))
    with pytest.raises(ShapeError):
        fvpn_loss(net(Tensor(rng.uniform(size=(1, 3, 64, 64)))), tgt, tiny_fvpn_config, guidance=False)


def test_cell_to_window():
    assert cell_to_window((2, 3), 0.5) == pytest.approx((24.0, 16.0, 120.0))
    assert cell_to_window((0, 0), 1.0) == pytest.approx((0.0, 0.0, 60.0))


def test_loss_falls_every_step_on_one_positive(rng, tiny_fvpn_config):
    net = make_fvpn(tiny_fvpn_config, seed=6)
    tgt = target(rng, np.array([1]), tiny_fvpn_config.knowledge_dim)
    image = images64(rng, (1, 3, 60, 60))
    opt = SGD(net.params, 0.005, momentum=0.0, weight_decay=0.0)
    losses = []
    with float64_mode():
        for _ in range(50):
            net.zero_grad()
            loss, _ = fvpn_loss(net(image), tgt, tiny_fvpn_config)
            losses.append(loss.item())
            loss.backward()
            opt.step()
    assert np.all(np.diff(losses) < 0)
