import csv
import json
import math
import os

import numpy as np
import pytest
from scipy.stats import chisquare

from dynscore import distill, nets, trainer
from dynscore.config import config_hash, load_config
from dynscore.degrade import degrade
from dynscore.rng import stream
from dynscore.schedule import build_vp_schedule

SMALL_NET = {"hidden_dims": [32, 32], "activation": "silu", "time_embed_dim": 16, "cond_embed_dim": 0}


def normal_cfg(**extra):
    """2-D standard normal target with a small teacher."""
    ov = {
        "target.weights": [1.0],
        "target.means": [[0.0, 0.0]],
        "target.covs": [[1.0, 1.0]],
        "teacher.kind": "network",
        "teacher.net": SMALL_NET,
        "teacher.steps": 1500,
        "teacher.batch_size": 128,
        **extra,
    }
    return load_config("default", ov)


def small_patch_cfg(**extra):
    ov = {
        "patch.pool_size": 64,
        "patch.eval_size": 16,
        "teacher.steps": 30,
        "teacher.net": {**SMALL_NET, "cond_embed_dim": 4},
        "fake.net": {**SMALL_NET, "cond_embed_dim": 4},
        "generator.hidden_dims": [16],
        "train.steps": 5,
        "train.batch_size": 8,
        **extra,
    }
    return load_config("patch", ov)


@pytest.fixture(scope="module")
def normal_teacher():
    return trainer.pretrain_teacher(normal_cfg())


def test_teacher_matches_gaussian_posterior(normal_teacher):
    # for N(0, I): E[x | x_t] = alpha_t x_t, so the optimal eps is sigma_t x_t
    s = build_vp_schedule()
    rng = np.random.default_rng(123)
    n = 4000
    x0 = rng.standard_normal((n, 2))
    t = rng.integers(1, 1001, n)
    x_t = s.alphas[t][:, None] * x0 + s.sigmas[t][:, None] * rng.standard_normal((n, 2))
    ref = s.sigmas[t][:, None] * x_t
    got = nets.forward(normal_teacher.spec, normal_teacher.params, x_t, t)
    cos = np.sum(ref * got) / (np.linalg.norm(ref) * np.linalg.norm(got))
    assert cos > 0.95
    assert normal_teacher.report["score_cosine"] > 0.95


def test_teacher_loss_decreases(normal_teacher):
    r = normal_teacher.report
    assert r["final_val_loss"] < r["init_val_loss"]


def test_teacher_deterministic(normal_teacher):
    again = trainer.pretrain_teacher(normal_cfg())
    assert again.params.tobytes() == normal_teacher.params.tobytes()


def test_teacher_cache(tmp_path, normal_teacher):
    cfg = normal_cfg(**{"teacher.steps": 20})
    first = trainer.pretrain_teacher(cfg, cache_dir=str(tmp_path))
    files = sorted(os.listdir(tmp_path))
    assert len(files) == 2
    second = trainer.pretrain_teacher(cfg, cache_dir=str(tmp_path))
    assert second.params.tobytes() == first.params.tobytes()
    assert second.report == first.report
    other = trainer.pretrain_teacher(normal_cfg(**{"teacher.steps": 21}), cache_dir=str(tmp_path))
    assert len(os.listdir(tmp_path)) == 4
    assert other.params.tobytes() != first.params.tobytes()


def test_teacher_divergence_aborts(monkeypatch):
    monkeypatch.setattr(trainer, "denoising_loss", lambda *a, **k: (float("nan"), np.zeros(1)))
    with pytest.raises(trainer.TrainingDiverged):
        trainer.pretrain_teacher(normal_cfg(**{"teacher.steps": 5}))


def test_make_dataset_deterministic():
    cfg = load_config("default")
    a = next(trainer.make_dataset(cfg))
    b = next(trainer.make_dataset(cfg))
    for f in ("hq", "lq", "y", "z"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    c = next(trainer.make_dataset(load_config("default", {"seed": 1})))
    assert c.hq.tobytes() != a.hq.tobytes()
    assert a.hq.shape == (32, 2) and a.z.shape == (32, 2)


def test_oracle_dataset_corruption():
    cfg = load_config("default", {"train.batch_size": 20000})
    b = next(trainer.make_dataset(cfg))
    assert np.std(b.lq - b.hq) == pytest.approx(cfg.target.lq_noise, rel=0.02)


def test_patch_dataset_lq_is_degraded_hq():
    cfg = small_patch_cfg()
    pool = trainer.patch_pool(cfg)
    for i in range(pool.size):
        ref = degrade(pool.hq[i].reshape(16, 16), cfg.patch.degradation, index=i)
        np.testing.assert_array_equal(pool.lq[i], ref.ravel())
    batch = next(trainer.make_dataset(cfg, pool=pool))
    for hq, lq in zip(batch.hq, batch.lq):
        i = int(np.flatnonzero((pool.hq == hq).all(axis=1))[0])
        np.testing.assert_array_equal(lq, pool.lq[i])


def test_patch_eval_split_is_disjoint():
    cfg = small_patch_cfg()
    train, ev = trainer.patch_pool(cfg, "train"), trainer.patch_pool(cfg, "eval")
    assert ev.size == 16
    assert not any((train.hq == h).all(axis=1).any() for h in ev.hq)
    with pytest.raises(ValueError):
        trainer.patch_pool(cfg, "test")


def test_patch_labels_uniform():
    cfg = small_patch_cfg(**{"patch.pool_size": 4096, "train.batch_size": 10_000})
    pool = trainer.PatchData(np.zeros((4096, 1)), np.zeros((4096, 1)),
                             trainer.make_patches(4096, 16, 4, stream(0, "patch-train"))[1])
    y = next(trainer.make_dataset(cfg, pool=pool)).y
    counts = np.bincount(y, minlength=4)
    assert chisquare(counts).pvalue > 0.01


def test_lr_factor():
    tc = load_config("default").train
    assert trainer.lr_factor(tc, 0, 100) == 1.0
    assert trainer.lr_factor(tc, 100, 100) == pytest.approx(tc.lr_floor)
    assert trainer.lr_factor(tc, 50, 100) == pytest.approx(tc.lr_floor + (1 - tc.lr_floor) * 0.5)


def test_specs_follow_config():
    cfg = load_config("patch")
    g = trainer.generator_spec(cfg)
    assert g.input_dim == 64 + 16 and g.output_dim == 256 and g.num_labels == 5
    d = trainer.denoiser_spec(cfg, cfg.teacher.net)
    assert d.input_dim == d.output_dim == 256 and d.time_period == 1000.0


def _fast_oracle(**extra):
    return load_config("default", {"teacher.steps": 100, "eval.samples": 500, "train.steps": 20, **extra})


def test_run_zero_steps(tmp_path):
    s = trainer.run_experiment(_fast_oracle(**{"train.steps": 0}), output_dir=str(tmp_path))
    assert len(s.evals) == 1 and s.final["step"] == 0
    with open(s.log_path) as fh:
        assert fh.read().strip() == ",".join(trainer.LOG_FIELDS)
    assert os.path.exists(s.checkpoints["final"]["generator"])


def test_run_directory_layout(tmp_path):
    cfg = _fast_oracle(**{"train.eval_every": 10, "train.checkpoint_every": 10})
    s = trainer.run_experiment(cfg, output_dir=str(tmp_path))
    assert [e["step"] for e in s.evals] == [0, 10, 20]
    assert set(s.checkpoints) == {"step000010", "step000020", "final"}
    with open(tmp_path / "config.json") as fh:
        assert json.load(fh)["config_hash"] == config_hash(cfg) == s.config_hash
    with open(s.metrics_path) as fh:
        m = json.load(fh)
    assert m["seed"] == cfg.seed and m["final"] == s.final
    with open(s.log_path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20 and list(rows[0]) == list(trainer.LOG_FIELDS)
    for r in rows:
        assert float(r["sigma_t"]) <= float(r["sigma_tmax"])
    spec, params = nets.load_params(s.checkpoints["final"]["generator"])
    assert spec == trainer.generator_spec(cfg)


def test_run_ablation_logs(tmp_path):
    s = trainer.run_experiment(_fast_oracle(**{"ablation.no_score": True}), output_dir=str(tmp_path / "a"))
    with open(s.log_path) as fh:
        assert all(float(r["dsm_norm"]) == 0.0 for r in csv.DictReader(fh))
    s = trainer.run_experiment(_fast_oracle(**{"ablation.no_dynamic": True}), output_dir=str(tmp_path / "b"))
    with open(s.log_path) as fh:
        assert all(int(r["Tmax"]) == 1000 for r in csv.DictReader(fh))


def test_run_abort_keeps_partial_log(tmp_path, monkeypatch):
    real = distill.train_step

    def flaky(state, batch, rng):
        rep = real(state, batch, rng)
        if rep.step == 4:
            rep.reg_loss = math.nan
        return rep

    monkeypatch.setattr(distill, "train_step", flaky)
    with pytest.raises(trainer.TrainingDiverged):
        trainer.run_experiment(_fast_oracle(), output_dir=str(tmp_path))
    with open(tmp_path / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3


def test_run_rejects_plain_dict(tmp_path):
    with pytest.raises(TypeError):
        trainer.run_experiment({"task": "oracle_2d"}, output_dir=str(tmp_path))


def test_patch_run_small(tmp_path):
    cfg = small_patch_cfg()
    s = trainer.run_experiment(cfg, output_dir=str(tmp_path))
    assert set(s.final) >= {"psnr", "ssim", "baseline_psnr"}
    assert s.final["n_samples"] == 16
    assert 0 < s.final["baseline_psnr"] < 99


def test_no_condition_eval_uses_null_label(tmp_path):
    cfg = small_patch_cfg(**{"ablation.no_condition": True, "train.steps": 0})
    teacher = trainer.pretrain_teacher(cfg)
    state = trainer.init_distill_state(cfg, teacher=teacher)
    assert state.config.null_label
    assert state.config.null_label_index == cfg.patch.num_labels
