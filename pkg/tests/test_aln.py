import numpy as np
import pytest
from scipy.special import expit

from dave.aln import ALN, AlnConfig, AttributeLabels, aln_forward, aln_loss, extract_knowledge, predict_attributes
from dave.errors import LabelError, ShapeError
from dave.tensor import Tensor, float64_mode, grad_check

ATTRIBUTE_HEADS = ("head_pose", "head_color", "head_type")


def crops(rng, n, side=16):
    return Tensor(rng.uniform(size=(n, 3, side, side)))


def head_grad_is_zero(net, head):
    return all(
        p.grad is None or not np.any(p.grad)
        for p in net.layer_parameters(head).values()
    )


def test_depth_presets_build_their_stage_counts():
    for depth, stages in (("shallow-4", (1, 1, 1, 1)), ("mid-8", (2, 2, 2, 2)), ("deep", (3, 3, 4, 4))):
        cfg = AlnConfig(input_side=16, depth=depth, feature_dim=4, base_channels=2)
        net = ALN(cfg)
        for s, count in enumerate(stages, start=1):
            convs = [k for k in net.params if k.startswith(f"aln/stage{s}.") and k.endswith(".w")]
            assert len(convs) == count


def test_config_validation():
    with pytest.raises(ValueError):
        AlnConfig(depth="enormous")
    with pytest.raises(ValueError):
        AlnConfig(num_types=7)
    with pytest.raises(ShapeError):
        AlnConfig(input_side=8, depth="shallow-4")


def test_forward_shapes_and_probabilities(rng, tiny_aln_config):
    heads = aln_forward(crops(rng, 3), ALN(tiny_aln_config, seed=1))
    assert heads.p_V.shape == (3, 2)
    assert heads.p_P.shape == (3, 5)
    assert heads.p_C.shape == (3, 5)
    assert heads.p_T.shape == (3, 6)
    assert heads.feature.shape == (3, tiny_aln_config.feature_dim)
    for p in (heads.p_V, heads.p_P, heads.p_C, heads.p_T):
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-5)


def test_forward_rejects_wrong_crop_size(rng, tiny_aln_config):
    with pytest.raises(ShapeError):
        ALN(tiny_aln_config)(crops(rng, 1, side=20))


def test_background_batch_trains_only_verification(rng, tiny_aln_config):
    net = ALN(tiny_aln_config, seed=2)
    labels = AttributeLabels.from_rows([(0, 0, 0, 0)] * 4)
    loss, parts = aln_loss(net(crops(rng, 4)), labels, tiny_aln_config)
    loss.backward()
    assert parts["l_pose"] == parts["l_color"] == parts["l_type"] == 0.0
    for head in ATTRIBUTE_HEADS:
        assert head_grad_is_zero(net, head)
    assert np.any(net.params["aln/head_verify.w"].grad)


def test_zero_lambda_masks_its_head(rng, tiny_aln_config):
    net = ALN(tiny_aln_config, seed=2)
    labels = AttributeLabels.from_rows([(1, 2, 3, 4), (1, 1, 5, 6), (0, 0, 0, 0)])
    loss, _ = aln_loss(net(crops(rng, 3)), labels, tiny_aln_config, lambdas=(1.0, 0.0, 1.0))
    loss.backward()
    assert head_grad_is_zero(net, "head_color")
    assert not head_grad_is_zero(net, "head_pose")
    assert not head_grad_is_zero(net, "head_type")


def test_catch_all_label_is_masked_per_task(rng, tiny_aln_config):
    net = ALN(tiny_aln_config, seed=2)
    labels = AttributeLabels.from_rows([(1, 2, 0, 4), (1, 3, 0, 1)])
    loss, parts = aln_loss(net(crops(rng, 2)), labels, tiny_aln_config)
    loss.backward()
    assert parts["l_color"] == 0.0
    assert head_grad_is_zero(net, "head_color")


def test_single_task_subset(rng, tiny_aln_config):
    net = ALN(tiny_aln_config, seed=2)
    labels = AttributeLabels.from_rows([(1, 2, 3, 4), (0, 0, 0, 0)])
    loss, parts = aln_loss(net(crops(rng, 2)), labels, tiny_aln_config, tasks=("pose",))
    loss.backward()
    assert parts["l_pose"] > 0
    assert head_grad_is_zero(net, "head_color")
    assert head_grad_is_zero(net, "head_type")


def test_label_validation(rng, tiny_aln_config):
    net = ALN(tiny_aln_config)
    heads = net(crops(rng, 1))
    with pytest.raises(LabelError):
        aln_loss(heads, AttributeLabels.from_rows([(0, 1, 0, 0)]), tiny_aln_config)
    with pytest.raises(LabelError):
        aln_loss(heads, AttributeLabels.from_rows([(1, 6, 1, 1)]), tiny_aln_config)
    with pytest.raises(LabelError):
        aln_loss(heads, AttributeLabels.from_rows([(1, 0, 0, 0)]), tiny_aln_config)


@pytest.mark.parametrize("seed", range(20))
def test_multitask_loss_gradients(seed):
    r = np.random.default_rng(seed)
    cfg = AlnConfig(input_side=16, depth="shallow-4", feature_dim=6, base_channels=3)
    with float64_mode():
        net = ALN(cfg, seed=seed)
        x = Tensor(r.uniform(size=(4, 3, 16, 16)))
    rows = [(1, int(r.integers(0, 6)), int(r.integers(0, 6)), int(r.integers(1, 7))) for _ in range(3)] + [(0, 0, 0, 0)]
    labels = AttributeLabels.from_rows(rows)
    lam = tuple(r.uniform(0.2, 1.5, size=3))

    def loss_of_crops(inp):
        return aln_loss(net(inp), labels, cfg, lambdas=lam)[0]

    def loss_of_project(_inp):
        return aln_loss(net(x), labels, cfg, lambdas=lam)[0]

    assert grad_check(loss_of_crops, x, samples=20, rng=r) <= 1e-4
    assert grad_check(loss_of_project, net.params["aln/project.w"], samples=20, rng=r) <= 1e-4


def test_extract_knowledge_is_detached_logistic(rng, tiny_aln_config):
    net = ALN(tiny_aln_config, seed=5)
    heads = net(crops(rng, 2))
    know = extract_knowledge(heads)
    assert not know.requires_grad
    np.testing.assert_allclose(know.data, expit(heads.feature.data), rtol=1e-6)
    assert np.all((know.data > 0) & (know.data < 1))


def test_predict_attributes_is_one_based(rng, tiny_aln_config):
    heads = ALN(tiny_aln_config, seed=6)(crops(rng, 5))
    rows = predict_attributes(heads)
    assert rows.shape == (5, 4)
    assert set(rows[:, 0]) <= {0, 1}
    assert rows[:, 1:].min() >= 1


def test_zero_weights_give_uniform_heads(rng, tiny_aln_config):
    heads = ALN(tiny_aln_config, zero=True)(crops(rng, 3))
    for p, n in ((heads.p_V, 2), (heads.p_P, tiny_aln_config.num_poses),
                 (heads.p_C, tiny_aln_config.num_colors), (heads.p_T, tiny_aln_config.num_types)):
        np.testing.assert_allclose(p.data, np.full((3, n), 1.0 / n), rtol=1e-6)


def test_uniform_prediction_loss_is_sum_of_log_class_counts(rng, tiny_aln_config):
    cfg = tiny_aln_config
    net = ALN(cfg, zero=True)
    labels = AttributeLabels.from_rows([(1, 1, 2, 3), (1, 5, 5, 6), (1, 3, 1, 1)])
    loss, _ = aln_loss(net(crops(rng, 3)), labels, cfg)
    expected = np.log(2) + np.log(cfg.num_poses) + np.log(cfg.num_colors) + np.log(cfg.num_types)
    assert loss.item() == pytest.approx(expected, rel=1e-5)
