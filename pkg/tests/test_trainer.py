import csv
import os

import numpy as np
import pytest

from dave import settings
from dave.errors import DatasetError, DivergenceError
from dave.model import ModelBundle
from dave.trainer import (
    CHECKPOINT_DIR,
    CURVE_COLUMNS,
    JointTrainer,
    TrainSchedule,
    TrainingPool,
    guidance_ablation,
    make_paired_batch,
    run_training,
    train_step,
)

TINY = dict(batch_size=4, phase1_epochs=1, phase2_epochs=1, steps_per_epoch=2, augment=False)


def tiny_schedule(**kw):
    opts = dict(TINY)
    opts.update(kw)
    return TrainSchedule(**opts)


@pytest.fixture
def pool(tiny_dataset):
    return TrainingPool.from_manifest(tiny_dataset)


# -------------------- Schedule --------------------

def test_schedule_phases():
    s = TrainSchedule(phase1_epochs=2, phase2_epochs=3, phase1_lr=0.01, phase2_lr=0.001)
    assert s.total_epochs == 5
    assert [s.phase(e) for e in range(5)] == [1, 1, 2, 2, 2]
    assert s.learning_rate(1) == 0.01 and s.learning_rate(2) == 0.001
    assert s.lambdas(0) == (1.0, 0.0, 1.0)
    assert s.lambdas(4) == (1.0, 1.0, 1.0)
    assert TrainSchedule(batch_size=5).positives_per_batch == 3


@pytest.mark.parametrize("kw", [
    dict(batch_size=0),
    dict(phase1_epochs=0, phase2_epochs=0),
    dict(phase1_lr=0.0),
    dict(steps_per_epoch=-1),
    dict(aln_tasks=("pose", "wheels")),
])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        TrainSchedule(**kw)


# -------------------- Paired batches --------------------

def test_paired_batch_layout(pool, rng):
    batch = make_paired_batch(pool, rng, 5, aln_side=16)
    assert len(batch) == 5
    assert batch.aln_crops.shape == (5, 3, 16, 16)
    assert batch.fvpn_patches.shape == (5, 3, 60, 60)
    assert batch.fvpn_targets.is_vehicle.tolist() == [1, 1, 1, 0, 0]
    assert batch.pairing_ok()
    np.testing.assert_array_equal(batch.fvpn_targets.loc_t[3:], 0.0)
    assert batch.aln_labels.V.tolist() == [1, 1, 1, 0, 0]
    assert not np.any(batch.aln_labels.P[3:]) and not np.any(batch.aln_labels.T[3:])
    for i in range(3):
        rec = pool.records[batch.image_index[i]]
        assert tuple(batch.crop_boxes[i]) in [tuple(b) for b in rec.boxes]


def test_paired_batch_pairs_views_under_augmentation(pool, rng):
    batch = make_paired_batch(pool, rng, 6, aln_side=16, augment=True)
    assert batch.pairing_ok()
    assert batch.fvpn_patches.min() >= 0.0 and batch.fvpn_patches.max() <= 1.0


def test_pool_without_vehicles_is_rejected():
    from dave.data.dataset import AnnotationRecord

    with pytest.raises(DatasetError):
        TrainingPool([AnnotationRecord("x.png")], loader=lambda i: np.zeros((80, 80, 3), np.float32))


# -------------------- Steps and runs --------------------

def test_train_step_moves_both_nets(pool, rng, tiny_model):
    trainer = JointTrainer(tiny_model, tiny_schedule())
    before_f = tiny_model.fvpn.params["fvpn/head_cls.w"].data.copy()
    before_a = tiny_model.aln.params["aln/head_verify.w"].data.copy()
    report = train_step(make_paired_batch(pool, rng, 4, aln_side=16, augment=False), trainer)
    for key in ("l_aln", "l_fvpn", "l_bic", "l_bbox_weighted", "l_know_weighted", "lr"):
        assert np.isfinite(report[key])
    assert report["l_color"] == 0.0
    assert not np.array_equal(before_f, tiny_model.fvpn.params["fvpn/head_cls.w"].data)
    assert not np.array_equal(before_a, tiny_model.aln.params["aln/head_verify.w"].data)


def test_unguided_step_has_no_knowledge_term(pool, rng, tiny_model):
    trainer = JointTrainer(tiny_model, tiny_schedule(knowledge_guidance=False))
    _, _, report = trainer.losses(make_paired_batch(pool, rng, 4, aln_side=16, augment=False))
    assert report["l_know_weighted"] == 0.0


def test_run_training_writes_curve_and_checkpoints(tmp_path, tiny_dataset, tiny_model):
    out = str(tmp_path / "run")
    result = run_training(tiny_dataset, tiny_schedule(), out, model=tiny_model, quiet=True)
    assert result.steps == 4
    with open(result.curve_csv, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == CURVE_COLUMNS
    assert [int(r["epoch"]) for r in rows] == [0, 0, 1, 1]
    assert float(rows[0]["lr"]) == pytest.approx(1e-3)
    assert float(rows[-1]["lr"]) == pytest.approx(1e-4)
    assert sorted(os.listdir(os.path.join(out, CHECKPOINT_DIR))) == [
        "epoch_001.daveckpt", "epoch_001.daveckpt.json", "epoch_002.daveckpt", "epoch_002.daveckpt.json",
    ]
    back = ModelBundle.load(result.checkpoint)
    for k, v in tiny_model.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v)


def test_deterministic_runs_are_bitwise_equal(tmp_path, tiny_dataset, tiny_fvpn_config, tiny_aln_config):
    paths = []
    for name in ("a", "b"):
        run = run_training(
            tiny_dataset, tiny_schedule(deterministic=True, augment=True, seed=11), str(tmp_path / name),
            fvpn_config=tiny_fvpn_config, aln_config=tiny_aln_config, quiet=True,
        )
        paths.append(run.checkpoint)
    with open(paths[0], "rb") as fa, open(paths[1], "rb") as fb:
        assert fa.read() == fb.read()


def test_prefetched_run_matches_deterministic_run(tmp_path, tiny_dataset, tiny_fvpn_config, tiny_aln_config):
    finals = []
    for name, det in (("serial", True), ("prefetch", False)):
        run = run_training(
            tiny_dataset, tiny_schedule(deterministic=det, seed=4), str(tmp_path / name),
            fvpn_config=tiny_fvpn_config, aln_config=tiny_aln_config, quiet=True,
        )
        finals.append(run.final)
    assert finals[0] == finals[1]


def test_guidance_ablation_runs_both_arms(tmp_path, tiny_dataset, tiny_fvpn_config, tiny_aln_config):
    result = guidance_ablation(
        tiny_dataset, tiny_schedule(phase2_epochs=0), [0, 1], str(tmp_path / "abl"),
        fvpn_config=tiny_fvpn_config, aln_config=tiny_aln_config, quiet=True,
    )
    assert len(result.guided) == len(result.unguided) == 2
    assert all(np.isfinite(result.guided + result.unguided))
    assert all(os.path.exists(p) for p in result.curves["guided"] + result.curves["unguided"])
    assert isinstance(result.guidance_helps, bool)


def test_guidance_ablation_needs_seeds(tmp_path, tiny_dataset):
    with pytest.raises(ValueError):
        guidance_ablation(tiny_dataset, tiny_schedule(), [], str(tmp_path))


def test_fixed_batch_loss_falls_on_nearly_every_step(pool, rng, tiny_model):
    batch = make_paired_batch(pool, rng, 4, aln_side=16, augment=False)
    trainer = JointTrainer(tiny_model, tiny_schedule(phase1_lr=1e-3, momentum=0.5))
    losses = []
    for _ in range(101):
        report = trainer.train_step(batch)
        losses.append(report["l_aln"] + report["l_fvpn"])
    falls = int(np.sum(np.diff(losses) < 0))
    assert falls >= 95


def test_divergence_is_caught_before_the_update(monkeypatch, pool, rng, tiny_model):
    monkeypatch.setattr(settings, "DIVERGENCE_LOSS", 0.0)
    trainer = JointTrainer(tiny_model, tiny_schedule())
    before = {k: v.copy() for k, v in tiny_model.fvpn.state_dict().items()}
    before.update({k: v.copy() for k, v in tiny_model.aln.state_dict().items()})
    with pytest.raises(DivergenceError, match="epoch 0"):
        trainer.train_step(make_paired_batch(pool, rng, 4, aln_side=16, augment=False))
    after = {**tiny_model.fvpn.state_dict(), **tiny_model.aln.state_dict()}
    for name, value in before.items():
        np.testing.assert_array_equal(after[name], value, err_msg=name)


def test_run_training_reports_the_diverging_step(monkeypatch, tmp_path, tiny_dataset, tiny_model):
    monkeypatch.setattr(settings, "DIVERGENCE_LOSS", 0.0)
    with pytest.raises(DivergenceError, match="step 0"):
        run_training(tiny_dataset, tiny_schedule(deterministic=True), str(tmp_path / "run"), model=tiny_model, quiet=True)


@pytest.mark.slow
def test_training_lowers_proposal_loss(tmp_path, tiny_dataset, tiny_fvpn_config, tiny_aln_config):
    schedule = TrainSchedule(
        batch_size=8, phase1_epochs=4, phase2_epochs=1, steps_per_epoch=15,
        phase1_lr=0.01, phase2_lr=0.001, augment=False, deterministic=True,
    )
    run = run_training(
        tiny_dataset, schedule, str(tmp_path / "fit"),
        fvpn_config=tiny_fvpn_config, aln_config=tiny_aln_config, quiet=True,
    )
    first = np.mean([r["l_bic"] for r in run.rows[:15]])
    last = np.mean([r["l_bic"] for r in run.rows[-15:]])
    assert last < first
