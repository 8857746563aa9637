"""Teacher pretraining, dataset streams and experiment orchestration."""

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import distill, metrics, nets
from .config import ExperimentConfig, config_hash, config_to_dict, data_dims, null_label_index, num_labels
from .degrade import degrade, read_corpus, upsample_nearest
from .oracle import GaussianMixture, sample
from .optim import AdamW
from .rng import stream
from .schedule import build_vp_schedule
from .textures import make_patches

__all__ = [
    "TrainingDiverged",
    "TeacherResult",
    "RunSummary",
    "PatchData",
    "build_schedule",
    "build_target",
    "generator_spec",
    "denoiser_spec",
    "patch_pool",
    "make_dataset",
    "lr_factor",
    "denoising_loss",
    "train_denoiser",
    "pretrain_teacher",
    "init_distill_state",
    "evaluate",
    "run_experiment",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; the message says where."""


# ----------------------------------------------------------------------------
# builders


def build_schedule(cfg):
    s = cfg.schedule
    return build_vp_schedule(s.T, s.beta_min, s.beta_max, weight_kind=s.weight_kind)


def build_target(cfg):
    t = cfg.target
    D = data_dims(cfg)[0]
    means = np.asarray(t.means, dtype=np.float64).reshape(len(t.weights), D)
    covs = np.asarray(t.covs, dtype=np.float64)
    if covs.ndim == 2 and covs.shape[1] == D * D and D > 1:
        covs = covs.reshape(-1, D, D)
    return GaussianMixture(np.asarray(t.weights, dtype=np.float64), means, covs)


def _label_slots(cfg, net):
    # one extra slot for the null condition
    return num_labels(cfg) + 1 if net.cond_embed_dim else 1


def generator_spec(cfg):
    hq_dim, lq_dim = data_dims(cfg)
    g = cfg.generator
    return nets.NetSpec(
        input_dim=lq_dim + cfg.distill.z_dim,
        hidden_dims=g.hidden_dims,
        output_dim=hq_dim,
        activation=g.activation,
        time_embed_dim=0,
        cond_embed_dim=g.cond_embed_dim,
        num_labels=_label_slots(cfg, g),
    )


def denoiser_spec(cfg, net):
    D = data_dims(cfg)[0]
    return nets.NetSpec(
        input_dim=D,
        hidden_dims=net.hidden_dims,
        output_dim=D,
        activation=net.activation,
        time_embed_dim=net.time_embed_dim,
        cond_embed_dim=net.cond_embed_dim,
        num_labels=_label_slots(cfg, net),
        time_period=float(cfg.schedule.T),
    )


# ----------------------------------------------------------------------------
# data


@dataclass
class PatchData:
    hq: np.ndarray  # (N, size*size)
    lq: np.ndarray  # (N, (size/r)**2)
    labels: np.ndarray

    @property
    def size(self):
        return self.hq.shape[0]


def patch_pool(cfg, split="train"):
    """Deterministic pool of HQ/LQ patch pairs.

    The training split comes from ``patch.corpus`` when set, otherwise both
    splits are generated procedurally. LQ patches are ``degrade(hq)`` with
    per-item noise streams; eval items use indices after the training pool.
    """
    p = cfg.patch
    if split == "train" and p.corpus:
        hq, lq, labels, _ = read_corpus(p.corpus)
        return PatchData(hq.reshape(len(hq), -1), lq.reshape(len(lq), -1), labels)
    if split not in ("train", "eval"):
        raise ValueError(f"unknown split {split!r}")
    n = p.pool_size if split == "train" else p.eval_size
    offset = 0 if split == "train" else p.pool_size
    hq, labels = make_patches(n, p.size, p.num_labels, stream(cfg.seed, f"patch-{split}"))
    lq = np.stack([degrade(h, p.degradation, index=offset + i) for i, h in enumerate(hq)])
    return PatchData(hq.reshape(n, -1), lq.reshape(n, -1), labels)


def make_dataset(cfg, rng=None, pool=None):
    """Infinite, seeded stream of training :class:`~dynscore.distill.Batch` objects.

    Oracle tasks draw ``hq`` from the target and set ``lq = hq + noise``;
    the patch task samples pairs from :func:`patch_pool`. ``z`` is fresh
    standard normal noise for every batch.
    """
    rng = stream(cfg.seed, "data") if rng is None else rng
    B = cfg.train.batch_size
    z_dim = cfg.distill.z_dim
    if cfg.is_oracle:
        gm = build_target(cfg)
        sigma = cfg.target.lq_noise
        while True:
            hq = sample(gm, B, rng)
            lq = hq + sigma * rng.standard_normal(hq.shape)
            z = rng.standard_normal((B, z_dim))
            yield distill.Batch(hq, lq, np.zeros(B, dtype=np.int64), z)
    pool = patch_pool(cfg, "train") if pool is None else pool
    while True:
        idx = rng.integers(0, pool.size, B)
        z = rng.standard_normal((B, z_dim))
        yield distill.Batch(pool.hq[idx], pool.lq[idx], pool.labels[idx], z)


def lr_factor(train_cfg, step, total):
    """Multiplier on the base learning rate at ``step`` (cosine decay to ``lr_floor``)."""
    if train_cfg.lr_schedule == "constant" or total <= 0:
        return 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return train_cfg.lr_floor + (1.0 - train_cfg.lr_floor) * c


# ----------------------------------------------------------------------------
# teacher


@dataclass
class TeacherResult:
    spec: nets.NetSpec
    params: np.ndarray
    input_scale: float
    report: dict = field(default_factory=dict)

    def as_teacher(self):
        return distill.NetworkTeacher(self.spec, self.params, self.input_scale)


def denoising_loss(spec, params, x0, t, y, eps, s, input_scale=1.0):
    """``mean_i |eps_i - eps_net(alpha_t x0_i + sigma_t eps_i, t_i, y_i)|^2`` and its gradient."""
    x_t = s.alphas[t][:, None] * x0 + s.sigmas[t][:, None] * eps
    x_in = input_scale * x_t
    diff = nets.forward(spec, params, x_in, t, y) - eps
    B = x0.shape[0]
    loss = float(np.sum(diff * diff) / B)
    grad, _ = nets.backward(spec, params, x_in, t, y, 2.0 * diff / B)
    return loss, grad


def train_denoiser(spec, params, draw, s, rng, *, steps, batch_size, lr, input_scale=1.0, label_dropout=0.0,
                   null_label=0):
    """Minimise the denoising loss with ``t ~ U[1, T]`` and cosine-decayed AdamW.

    ``draw(n, rng)`` returns ``(x0, labels)``. With ``label_dropout > 0``
    labels are replaced by ``null_label`` at that rate so the network also
    learns the unconditional noise predictor.

    Raises
    ------
    TrainingDiverged
        If the loss or gradient becomes non-finite.
    """
    T = s.num_steps
    opt = AdamW(spec.n_params, lr=lr, weight_decay=0.0)
    for i in range(steps):
        x0, y = draw(batch_size, rng)
        t = rng.integers(1, T + 1, batch_size)
        eps = rng.standard_normal(x0.shape)
        if spec.cond_embed_dim and label_dropout > 0:
            y = np.where(rng.random(batch_size) < label_dropout, null_label, y)
        loss, grad = denoising_loss(spec, params, x0, t, y, eps, s, input_scale)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged(f"denoiser training diverged at step {i}: loss={loss}")
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * i / steps))
        params = opt.update(params, grad)
        if i % 2000 == 0:
            log.debug("denoiser step %d loss %.5f", i, loss)
    return params


def _teacher_sampler(cfg, pool):
    """``draw(n, rng) -> (x0, labels)`` over the target distribution."""
    if cfg.is_oracle:
        gm = build_target(cfg)
        return lambda n, rng: (sample(gm, n, rng), np.zeros(n, dtype=np.int64))

    def draw(n, rng):
        idx = rng.integers(0, pool.size, n)
        return pool.hq[idx], pool.labels[idx]

    return draw


def _teacher_key(cfg, net, input_scale, pool):
    d = config_to_dict(cfg)
    relevant = {
        "task": d["task"],
        "seed": d["seed"],
        "schedule": d["schedule"],
        "target": d["target"] if cfg.is_oracle else None,
        "patch": d["patch"] if not cfg.is_oracle else None,
        "teacher": {k: v for k, v in d["teacher"].items() if k not in ("cache_dir", "kind", "net", "input_scale")},
        "net": config_to_dict(net),
        "input_scale": input_scale,
        # the pool content, not only its config, defines the training data
        "pool": hashlib.sha256(pool.hq.tobytes()).hexdigest() if pool is not None else None,
    }
    blob = json.dumps(relevant, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def pretrain_teacher(cfg, net=None, input_scale=None, pool=None, cache_dir=None):
    """Train a noise-prediction network on the target with ``t ~ U[1, T]``.

    Parameters
    ----------
    cfg : ExperimentConfig
    net : NetConfig, optional
        Architecture; defaults to ``cfg.teacher.net``.
    input_scale : float, optional
        Factor applied to ``x_t`` before the network; defaults to
        ``cfg.teacher.input_scale``.
    cache_dir : str, optional
        Reuse or store the result under a key derived from the relevant
        config entries. Defaults to ``cfg.teacher.cache_dir`` (empty: off).

    Returns
    -------
    TeacherResult
        Frozen parameters and a report with held-out losses and, on oracle
        tasks, the cosine similarity to the analytic noise predictor.

    Raises
    ------
    TrainingDiverged
        If the loss becomes non-finite.
    """
    tc = cfg.teacher
    net = tc.net if net is None else net
    input_scale = tc.input_scale if input_scale is None else float(input_scale)
    spec = denoiser_spec(cfg, net)
    cache_dir = tc.cache_dir if cache_dir is None else cache_dir
    if pool is None and not cfg.is_oracle:
        pool = patch_pool(cfg, "train")
    if cache_dir:
        key = _teacher_key(cfg, net, input_scale, pool)
        ckpt = os.path.join(cache_dir, f"teacher-{key}.dsnp")
        rep_path = os.path.join(cache_dir, f"teacher-{key}.json")
        if os.path.exists(ckpt) and os.path.exists(rep_path):
            _, params = nets.load_params(ckpt, spec)
            with open(rep_path) as fh:
                report = json.load(fh)
            log.info("teacher cache hit %s", ckpt)
            return TeacherResult(spec, params, input_scale, report)

    s = build_schedule(cfg)
    draw = _teacher_sampler(cfg, pool)
    null_idx = null_label_index(cfg)
    T = s.num_steps

    init_rng = stream(cfg.seed, f"teacher-init-{spec.digest().hex()[:8]}")
    params = nets.init_params(spec, init_rng)

    val_rng = stream(cfg.seed, "teacher-val")
    vx, vy = draw(1024, val_rng)
    vt = val_rng.integers(1, T + 1, vx.shape[0])
    veps = val_rng.standard_normal(vx.shape)

    def val_loss(p):
        return denoising_loss(spec, p, vx, vt, vy, veps, s, input_scale)[0]

    init_loss = val_loss(params)
    params = train_denoiser(
        spec,
        params,
        draw,
        s,
        stream(cfg.seed, "teacher-train"),
        steps=tc.steps,
        batch_size=tc.batch_size,
        lr=tc.lr,
        input_scale=input_scale,
        label_dropout=tc.label_dropout,
        null_label=null_idx,
    )
    report = {"steps": tc.steps, "init_val_loss": init_loss, "final_val_loss": val_loss(params)}
    if cfg.is_oracle:
        report["score_cosine"] = _oracle_agreement(cfg, spec, params, input_scale, s)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        nets.save_params(ckpt, spec, params)
        with open(rep_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return TeacherResult(spec, params, input_scale, report)


def _oracle_agreement(cfg, spec, params, input_scale, s, n=2048):
    """Cosine similarity between network and analytic noise predictions on held-out ``x_t``."""
    gm = build_target(cfg)
    rng = stream(cfg.seed, "teacher-check")
    x0 = sample(gm, n, rng)
    t = rng.integers(1, s.num_steps + 1, n)
    x_t = s.alphas[t][:, None] * x0 + s.sigmas[t][:, None] * rng.standard_normal(x0.shape)
    y = np.zeros(n, dtype=np.int64)
    ref = distill.OracleTeacher(gm).eps(x_t, t, y, s)
    got = nets.forward(spec, params, input_scale * x_t, t, y)
    return float(np.sum(ref * got) / (np.linalg.norm(ref) * np.linalg.norm(got)))


# ----------------------------------------------------------------------------
# distillation


def init_distill_state(cfg, teacher=None, pool=None):
    """Build the generator, fake network and teacher for ``cfg``.

    ``teacher`` may be a :class:`TeacherResult`; otherwise a network teacher
    is pretrained (or loaded from the cache) when ``teacher.kind`` asks for
    one.
    """
    s = build_schedule(cfg)
    dcfg = cfg.effective_distill()
    gspec = generator_spec(cfg)
    gen_params = nets.init_params(gspec, stream(cfg.seed, "init-gen"), zero_output=True)

    if cfg.teacher.kind == "oracle":
        teacher_obj = distill.OracleTeacher(build_target(cfg))
    else:
        teacher = teacher or pretrain_teacher(cfg, pool=pool)
        teacher_obj = teacher.as_teacher()

    fspec = denoiser_spec(cfg, cfg.fake.net)
    if cfg.fake.init == "random":
        fake_params = nets.init_params(fspec, stream(cfg.seed, "init-fake"))
    elif (
        isinstance(teacher_obj, distill.NetworkTeacher)
        and teacher_obj.spec == fspec
        and teacher_obj.input_scale == dcfg.fake_in_scale
    ):
        fake_params = np.array(teacher_obj.params)
    else:
        fake_params = pretrain_teacher(cfg, net=cfg.fake.net, input_scale=dcfg.fake_in_scale, pool=pool).params
    return distill.init_state(gspec, gen_params, fspec, fake_params, teacher_obj, s, dcfg)


def _eval_labels(cfg, labels):
    if cfg.ablation.no_condition:
        return np.full_like(labels, null_label_index(cfg))
    return labels


def evaluate(cfg, state, step, eval_pool=None):
    """Evaluate the current generator on a fixed held-out set.

    Oracle tasks report per-mode (or single-Gaussian) fitted KL and MMD to
    fresh target samples; the patch task reports PSNR/SSIM against HQ and
    the PSNR of the upsampled-LQ baseline.
    """
    rng = stream(cfg.seed, "eval")
    z_dim = cfg.distill.z_dim
    if cfg.is_oracle:
        gm = build_target(cfg)
        n = cfg.eval.samples
        hq = sample(gm, n, rng)
        lq = hq + cfg.target.lq_noise * rng.standard_normal(hq.shape)
        z = rng.standard_normal((n, z_dim))
        x = distill.generate(state, distill.Batch(hq, lq, np.zeros(n, dtype=np.int64), z))
        ref = sample(gm, n, stream(cfg.seed, "eval-ref"))
        report = metrics.EvalReport(cfg.task, step, n, mmd2=metrics.mmd2(x, ref, cfg.eval.mmd_bandwidth))
        if gm.n_components == 1:
            report.fit_kl = metrics.fit_gaussian_kl(x, gm)
        else:
            report.mode_kl = metrics.per_mode_kl(x, gm)
            report.fit_kl = float(np.mean(report.mode_kl))
        return report

    pool = patch_pool(cfg, "eval") if eval_pool is None else eval_pool
    n = pool.size
    z = rng.standard_normal((n, z_dim))
    labels = _eval_labels(cfg, pool.labels)
    x = distill.generate(state, distill.Batch(pool.hq, pool.lq, labels, z))
    side = cfg.patch.size
    r = cfg.patch.degradation.downsample_factor
    out = np.clip(x, 0.0, 1.0).reshape(n, side, side)
    hq = pool.hq.reshape(n, side, side)
    base = np.stack([upsample_nearest(l.reshape(side // r, side // r), r) for l in pool.lq])
    return metrics.EvalReport(
        cfg.task,
        step,
        n,
        psnr=float(np.mean([metrics.psnr(a, b) for a, b in zip(out, hq)])),
        ssim=float(np.mean([metrics.ssim(a, b) for a, b in zip(out, hq)])),
        baseline_psnr=float(np.mean([metrics.psnr(a, b) for a, b in zip(base, hq)])),
    )


@dataclass
class RunSummary:
    config_hash: str
    seed: int
    output_dir: str
    final: dict
    evals: list
    log_path: str
    timing_path: str
    metrics_path: str
    checkpoints: dict
    teacher_report: dict = field(default_factory=dict)


LOG_FIELDS = distill.StepReport.FIELDS + ("lr_gen",)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _save_checkpoints(state, ckpt_dir, tag):
    paths = {
        "generator": os.path.join(ckpt_dir, f"generator_{tag}.dsnp"),
        "fake": os.path.join(ckpt_dir, f"fake_{tag}.dsnp"),
    }
    nets.save_params(paths["generator"], state.gen_spec, state.gen_params)
    nets.save_params(paths["fake"], state.fake_spec, state.fake_params)
    return paths


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg, output_dir=None, teacher=None, on_step=None):
    """Train a generator for ``cfg.train.steps`` steps and write a run directory.

    Layout of ``output_dir``::

        config.json            resolved configuration
        train_log.csv          one row per step (deterministic)
        timing.csv             wall-clock per step (not deterministic)
        checkpoints/*.dsnp     generator and fake network parameters
        metrics.json           evaluations, final metrics, config hash, seed

    Logs written before a failure are kept on disk.
    """
    if not isinstance(cfg, ExperimentConfig):
        raise TypeError("cfg must be an ExperimentConfig")
    out = output_dir or cfg.output_dir
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    chash = config_hash(cfg)
    _write_json(os.path.join(out, "config.json"), {"config": config_to_dict(cfg), "config_hash": chash})

    pool = None if cfg.is_oracle else patch_pool(cfg, "train")
    eval_pool = None if cfg.is_oracle else patch_pool(cfg, "eval")
    if cfg.teacher.kind == "network" and teacher is None:
        teacher = pretrain_teacher(cfg, pool=pool)
    state = init_distill_state(cfg, teacher=teacher, pool=pool)
    data = make_dataset(cfg, pool=pool)
    streams = distill.TrainStreams.from_seed(cfg.seed)
    tc = cfg.train
    base_lr_gen, base_lr_fake = state.config.lr_gen, state.config.lr_fake

    log_path = os.path.join(out, "train_log.csv")
    timing_path = os.path.join(out, "timing.csv")
    metrics_path = os.path.join(out, "metrics.json")
    evals = [evaluate(cfg, state, 0, eval_pool).to_dict()]
    checkpoints = {}
    with open(log_path, "w", newline="") as lf, open(timing_path, "w", newline="") as tf:
        lw, tw = csv.writer(lf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        lw.writerow(LOG_FIELDS)
        tw.writerow(("step", "wall_ms"))
        for i in range(tc.steps):
            f = lr_factor(tc, i, tc.steps)
            state.opt_gen.lr = base_lr_gen * f
            state.opt_fake.lr = base_lr_fake * f
            t0 = time.perf_counter()
            rep = distill.train_step(state, next(data), streams)
            wall = (time.perf_counter() - t0) * 1e3
            if not (math.isfinite(rep.reg_loss) and math.isfinite(rep.fake_loss)):
                lf.flush()
                raise TrainingDiverged(f"distillation diverged at step {rep.step}: {rep}")
            lw.writerow([_fmt(v) for v in rep.as_row()] + [_fmt(state.opt_gen.lr)])
            tw.writerow((rep.step, f"{wall:.3f}"))
            if on_step is not None:
                on_step(rep)
            if tc.eval_every and rep.step % tc.eval_every == 0 and rep.step != tc.steps:
                evals.append(evaluate(cfg, state, rep.step, eval_pool).to_dict())
            if tc.checkpoint_every and rep.step % tc.checkpoint_every == 0:
                checkpoints[f"step{rep.step:06d}"] = _save_checkpoints(state, ckpt_dir, f"step{rep.step:06d}")
    if tc.steps:
        evals.append(evaluate(cfg, state, tc.steps, eval_pool).to_dict())
    checkpoints["final"] = _save_checkpoints(state, ckpt_dir, "final")

    teacher_report = teacher.report if teacher is not None else {}
    summary = RunSummary(
        config_hash=chash,
        seed=cfg.seed,
        output_dir=out,
        final=evals[-1],
        evals=evals,
        log_path=log_path,
        timing_path=timing_path,
        metrics_path=metrics_path,
        checkpoints=checkpoints,
        teacher_report=teacher_report,
    )
    _write_json(
        metrics_path,
        {"config_hash": chash, "seed": cfg.seed, "task": cfg.task, "evals": evals, "final": evals[-1],
         "teacher": teacher_report},
    )
    return summary
