"""Command-line entry point.

Exit codes: 0 success, 1 failed check or run error, 2 configuration error.
Set ``DYNSCORE_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, distill, nets
from .config import ConfigError, config_hash, load_config
from .degrade import degrade, read_pgm, write_corpus, write_pgm
from .distill import gaussian_gradient_check
from .rng import stream
from .textures import make_patches
from .trainer import (
    TrainingDiverged,
    build_schedule,
    denoiser_spec,
    evaluate,
    generator_spec,
    pretrain_teacher,
    run_experiment,
)

log = logging.getLogger("dynscore")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _common(p):
    p.add_argument("--config", default="default", help="preset name or TOML file (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dynscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-teacher", help="train the teacher noise predictor")
    _common(p)

    p = sub.add_parser("distill", help="run a distillation experiment")
    _common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-score", action="store_true", help="ablation: drop the KL term")
    p.add_argument("--no-dynamic", action="store_true", help="ablation: T_max = T, fixed loss ratio")
    p.add_argument("--no-condition", action="store_true", help="ablation: null condition label")

    p = sub.add_parser("eval", help="evaluate a generator checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every configured network")
    _common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("verify-eq5", help="closed-form check of the score-difference KL gradient")
    _common(p)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--mu", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.8, help="target alpha_t of the checked timestep")

    p = sub.add_parser("degrade", help="degrade a PGM patch")
    _common(p)
    p.add_argument("input", help="input P5 PGM")
    p.add_argument("--index", type=int, default=0, help="item index of the noise stream")

    p = sub.add_parser("make-corpus", help="write procedural HQ/LQ patch pairs")
    _common(p)
    p.add_argument("--count", type=int, default=256)
    return parser


def _write_result(out, name, payload):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _header(cmd, cfg):
    return {"command": cmd, "config_hash": config_hash(cfg), "seed": cfg.seed}


def cmd_pretrain_teacher(args, cfg, out):
    res = pretrain_teacher(cfg)
    ckpt = os.path.join(out, "teacher.dsnp")
    os.makedirs(out, exist_ok=True)
    nets.save_params(ckpt, res.spec, res.params)
    _write_result(out, "result.json", {**_header("pretrain-teacher", cfg), "checkpoint": ckpt, "report": res.report})
    print(json.dumps(res.report, sort_keys=True))
    return EXIT_OK


def cmd_distill(args, cfg, out):
    summary = run_experiment(cfg, output_dir=out)
    payload = {
        **_header("distill", cfg),
        "final": summary.final,
        "log": summary.log_path,
        "metrics": summary.metrics_path,
        "checkpoints": summary.checkpoints,
    }
    _write_result(out, "result.json", payload)
    print(json.dumps(summary.final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg, out):
    spec, params = nets.load_params(args.checkpoint)
    if spec != generator_spec(cfg):
        raise ConfigError("checkpoint does not match the configured generator")
    # generation needs neither teacher nor fake network
    fspec = denoiser_spec(cfg, cfg.fake.net)
    state = distill.init_state(spec, params, fspec, np.zeros(fspec.n_params), None, build_schedule(cfg),
                               cfg.effective_distill())
    report = evaluate(cfg, state, step=-1).to_dict()
    _write_result(out, "result.json", {**_header("eval", cfg), "checkpoint": args.checkpoint, "eval": report})
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    rng = stream(cfg.seed, "gradcheck")
    s = build_schedule(cfg)
    specs = {"generator": generator_spec(cfg), "teacher": denoiser_spec(cfg, cfg.teacher.net),
             "fake": denoiser_spec(cfg, cfg.fake.net)}
    reports, ok = {}, True
    for name, spec in specs.items():
        params = nets.init_params(spec, rng)
        # nonzero biases so every parameter block is exercised
        params += 0.1 * rng.standard_normal(params.shape)
        x = rng.standard_normal((3, spec.input_dim))
        t = rng.integers(1, s.num_steps + 1, 3)
        y = rng.integers(0, spec.num_labels, 3)
        rep = nets.gradcheck(spec, params, x, t, y, args.tolerance, rng=rng)
        reports[name] = {"max_rel_err": rep.max_rel_err, "pass": rep.passed, "n_checked": rep.n_checked,
                         "worst": rep.worst, "n_params": spec.n_params}
        ok &= rep.passed
        print(f"{name:10s} n_params={spec.n_params:7d} max_rel_err={rep.max_rel_err:.3e} {'PASS' if rep.passed else 'FAIL'}")
    _write_result(out, "result.json", {**_header("gradcheck", cfg), "tolerance": args.tolerance, "networks": reports,
                                       "pass": ok})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_verify_kl_gradient(args, cfg, out):
    res = gaussian_gradient_check(build_schedule(cfg), n_samples=args.samples, seed=cfg.seed, mu=args.mu,
                                  alpha_target=args.alpha)
    _write_result(out, "result.json", {**_header("verify-eq5", cfg), **res})
    print(f"t={res['t']} alpha_t={res['alpha_t']:.6f} estimate={res['estimate']:.6f} "
          f"expected={res['expected']:.6f} stderr={res['stderr']:.2e}")
    print(f"cosine={res['cosine']:.6f} {'PASS' if res['passed'] else 'FAIL'}")
    return EXIT_OK if res["passed"] else EXIT_FAIL


def cmd_degrade(args, cfg, out):
    p = read_pgm(args.input)
    dcfg = cfg.patch.degradation
    lq = degrade(p, dcfg, index=args.index)
    os.makedirs(out, exist_ok=True)
    dst = os.path.join(out, os.path.splitext(os.path.basename(args.input))[0] + "_lq.pgm")
    write_pgm(dst, lq)
    _write_result(out, "result.json", {**_header("degrade", cfg), "input": args.input, "output": dst,
                                       "index": args.index, "degradation": dcfg.to_dict()})
    print(dst)
    return EXIT_OK


def cmd_make_corpus(args, cfg, out):
    p = cfg.patch
    hq, labels = make_patches(args.count, p.size, p.num_labels, stream(cfg.seed, "patch-train"))
    manifest = write_corpus(out, hq, p.degradation, labels)
    _write_result(out, "result.json", {**_header("make-corpus", cfg), "count": len(manifest["items"])})
    print(f"wrote {len(manifest['items'])} pairs to {out}")
    return EXIT_OK


COMMANDS = {
    "pretrain-teacher": cmd_pretrain_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "verify-eq5": cmd_verify_kl_gradient,
    "degrade": cmd_degrade,
    "make-corpus": cmd_make_corpus,
}


def _overrides(args):
    ov = {}
    if args.seed is not None:
        ov["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        ov["train.steps"] = args.steps
    for flag in ("no_score", "no_dynamic", "no_condition"):
        if getattr(args, flag, False):
            ov[f"ablation.{flag}"] = True
    return ov


def main(argv=None):
    logging.basicConfig(level=os.environ.get("DYNSCORE_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        out = args.out or cfg.output_dir
        return COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
