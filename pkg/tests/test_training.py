import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from changecast.augment import AugmentConfig, augment
from changecast.dataset import PairSet, SynthConfig, synth_generate
from changecast.dataset.store import files_hash, write_patch
from changecast.network import ModelBundle, Task
from changecast.sampling import ChangeSampler
from changecast.training import (
    TrainConfig, TrainingDiverged, build_stage2_bundle, load_manifest, run_manifest, train_stage1, train_stage2,
)


@pytest.fixture(scope="module")
def world():
    cfg = SynthConfig(n_locations=3, image_size=64, n_months=14, construction_rate=0.6, building_size=(3, 6))
    return synth_generate(cfg, seed=0)


@pytest.fixture(scope="module")
def det_set(world):
    return PairSet(world, None, 32)


@pytest.fixture(scope="module")
def fc_set(world):
    return PairSet(world, [3], 32, with_t1=False)


def quick(stage, task, **kw):
    base = dict(stage=stage, task=task, max_steps=4, batch_size=2, augment=False, freeze_steps=2)
    return TrainConfig(**(base | kw))


# ---------------------------------------------------------------- augmentation

def test_augment_off_is_identity(det_set):
    s = det_set[5]
    assert augment(s, 0, AugmentConfig.off()) is s


def test_augment_mirror_keeps_correspondence(det_set):
    s = det_set[7]
    cfg = dataclasses.replace(AugmentConfig.off(), mirror=True)
    for seed in range(8):
        a = augment(s, seed, cfg)
        flips = [f for f in ((), (-1,), (-2,), (-2, -1))
                 if np.array_equal(np.flip(s.image_t0, f) if f else s.image_t0, a.image_t0)]
        assert flips, "mirroring produced an image that is not a flip of the input"
        f = flips[0]
        flip = (lambda x: np.flip(x, f)) if f else (lambda x: x)
        np.testing.assert_array_equal(flip(s.image_t1), a.image_t1)
        np.testing.assert_array_equal(flip(s.change_mask), a.change_mask)
        np.testing.assert_array_equal(flip(s.first_change_month), a.first_change_month)


def test_augment_replay_and_label_values(det_set):
    s = det_set[3]
    a, b = augment(s, 42), augment(s, 42)
    np.testing.assert_array_equal(a.image_t0, b.image_t0)
    np.testing.assert_array_equal(a.change_mask, b.change_mask)
    assert set(np.unique(a.change_mask)) <= {0, 1}
    assert set(np.unique(a.first_change_month)) <= set(np.unique(s.first_change_month))
    assert a.n_change == int(a.change_mask.sum())
    assert a.image_t0.shape == s.image_t0.shape and a.image_t0.dtype == np.float32
    assert not np.array_equal(augment(s, 43).image_t0, a.image_t0)


def test_jitter_touches_images_only(det_set):
    s = det_set[3]
    cfg = dataclasses.replace(AugmentConfig.off(), jitter=True)
    a = augment(s, 1, cfg)
    np.testing.assert_array_equal(a.change_mask, s.change_mask)
    assert not np.allclose(a.image_t0, s.image_t0)
    # independent draws for the two images of a pair
    r0 = a.image_t0.mean() / s.image_t0.mean()
    r1 = a.image_t1.mean() / s.image_t1.mean()
    assert abs(r0 - r1) > 1e-4


# ---------------------------------------------------------------- config

def test_batch_size_rule():
    assert TrainConfig(stage=2, task="forecast(6)").effective_batch_size == 16
    assert TrainConfig(stage=2, task="forecast(21)").effective_batch_size == 4
    assert TrainConfig(stage=2, task="forecast(24)").effective_batch_size == 4
    assert TrainConfig(stage=2, task="forecast(24)", batch_size=8).effective_batch_size == 8
    assert TrainConfig().effective_batch_size == 16


def test_config_defaults_and_validation():
    cfg = TrainConfig(stage=2, task="timerange")
    assert cfg.base_lr == 1e-4 and cfg.effective_fine_lr == pytest.approx(1e-5)
    assert cfg.freeze_steps == 5000 and cfg.default_threshold == 0.33
    assert TrainConfig().effective_max_steps == 20_000
    with pytest.raises(ValueError):
        TrainConfig(stage=1, task="forecast(3)")
    with pytest.raises(ValueError):
        TrainConfig(stage=2, task="forecast(3)", init="imagenet")
    with pytest.raises(ValueError):
        TrainConfig.from_json({"stage": 1, "learning_rate": 0.1})


def test_seeds_are_split_per_subsystem():
    s = TrainConfig(seed=3).seeds()
    assert len(set(s.values())) == 3
    assert s == TrainConfig(seed=3).seeds() != TrainConfig(seed=4).seeds()


def test_init_backbone_mismatch_rejected():
    init = ModelBundle(Task("detect"))
    with pytest.raises(ValueError):
        build_stage2_bundle(TrainConfig(stage=2, task="forecast(3)", init="stage1", feature_dim=8), init)


# ---------------------------------------------------------------- training loops

def test_stage1_step0_loss_is_log2(det_set):
    res = train_stage1(det_set, quick(1, "detect", max_steps=1))
    assert res.history[0]["loss"] == pytest.approx(math.log(2), rel=0.3)


def test_stage1_writes_log_and_checkpoints(det_set, tmp_path):
    val = PairSet(det_set.series[:1], [3], 32)
    res = train_stage1(det_set, quick(1, "detect", val_every=2), val_set=val, out_dir=tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines if "loss" in x] == [1, 2, 3, 4]
    assert all(math.isfinite(x["loss"]) for x in lines if "loss" in x)
    assert any("val_f1" in x for x in lines)
    assert (tmp_path / "final.pt").exists() and (tmp_path / "final.pt.json").exists()
    assert res.best_val is not None


def test_deterministic_replay(det_set):
    cfg = quick(1, "detect", max_steps=100, augment=True, seed=5)
    a = train_stage1(det_set, cfg).history[-1]["loss"]
    b = train_stage1(det_set, cfg).history[-1]["loss"]
    assert a == pytest.approx(b, abs=1e-6)


def test_freeze_contract_and_lr_schedule(fc_set):
    init = ModelBundle(Task("detect"))
    before = {k: v.clone() for k, v in init.backbone.state_dict().items()}
    cfg = quick(2, "forecast(3)", init="stage1", max_steps=5, freeze_steps=3)
    frozen = train_stage2(fc_set, dataclasses.replace(cfg, max_steps=3), init=init)
    for k, v in frozen.bundle.backbone.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert frozen.bundle.provenance == "stage1"

    res = train_stage2(fc_set, cfg, init=init)
    lrs = [(h["phase"], h["lr"]) for h in res.history]
    assert lrs == [("frozen", 1e-4)] * 3 + [("finetune", pytest.approx(1e-5))] * 2
    changed = [k for k, v in res.bundle.backbone.state_dict().items() if not torch.equal(v, before[k])]
    assert changed, "phase B must update the backbone"


def test_timerange_training_runs(world):
    data = PairSet(world, [12], 32, with_t1=False)
    res = train_stage2(data, quick(2, "timerange"))
    first = res.history[0]
    assert first["loss"] == pytest.approx(first["loss_time"] + 1000 * first["loss_binary"], rel=1e-5)
    assert res.tracker.default == 0.33


def test_nan_loss_raises(det_set):
    class Poisoned:
        n_change = det_set.n_change

        def __len__(self):
            return len(det_set)

        def __getitem__(self, i):
            s = det_set[i]
            img = s.image_t0.copy()
            img[0, 0, 0] = np.nan
            return dataclasses.replace(s, image_t0=img)

    with pytest.raises(TrainingDiverged) as e:
        train_stage1(Poisoned(), quick(1, "detect"))
    assert e.value.step == 0


def test_empty_training_set_rejected(world):
    empty = PairSet(world, [29], 32)
    assert len(empty) == 0
    with pytest.raises(ValueError):
        train_stage1(empty, quick(1, "detect"))


def test_oversampling_beats_prior():
    # full-size tiles with construction clustered in development zones, as in real imagery
    cfg = SynthConfig(n_locations=2, image_size=1024, n_months=8, construction_rate=0.04, n_zones=2, zone_radius=64)
    data = PairSet(synth_generate(cfg, seed=1), [6], 224, with_t1=False)
    counts = data.n_change
    prior = counts.sum() / (len(data) * 224 * 224)
    assert 0 < prior < 0.01
    sampler = ChangeSampler(counts, a=50, seed=0)
    fractions = [counts[sampler.draw_batch(16)].sum() / (16 * 224 * 224) for _ in range(200)]
    assert np.mean(fractions) >= 3 * prior


# ---------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    cfg = TrainConfig(stage=2, task="forecast(9)", seed=11, augment={"rotation_deg": 3.0})
    path = run_manifest(cfg, {"f1": np.float64(0.4), "scores": np.zeros(3)}, tmp_path / "m.json", {"train": "abc"})
    back, record = load_manifest(path)
    assert back == cfg
    assert record["results"] == {"f1": 0.4}
    assert record["seeds"]["root"] == 11 and record["data_hashes"] == {"train": "abc"}


def test_manifest_unwritable(tmp_path):
    (tmp_path / "f").write_text("")
    with pytest.raises(RuntimeError):
        run_manifest(TrainConfig(), {}, tmp_path / "f" / "m.json")


def test_data_hash_tracks_patch_files(det_set, tmp_path):
    paths = [write_patch(det_set[i], tmp_path) for i in range(3)]
    h = files_hash(paths)
    assert h == files_hash(paths)
    write_patch(dataclasses.replace(det_set[0], n_change=det_set[0].n_change + 1), tmp_path)
    assert files_hash(paths) != h


def test_replay_from_manifest(det_set, tmp_path):
    cfg = quick(1, "detect", max_steps=100, seed=2)
    first = train_stage1(det_set, cfg).history[-1]["loss"]
    path = run_manifest(cfg, {"loss": first}, tmp_path / "m.json")
    again = train_stage1(det_set, load_manifest(path)[0]).history[-1]["loss"]
    assert again == pytest.approx(first, abs=1e-6)
