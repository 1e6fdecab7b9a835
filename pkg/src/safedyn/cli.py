"""Command-line entry point: ``safedyn <subcommand> ...``.

Subcommands::

    identify   --benchmark b1|b2 --degree D --ridge RHO --out model.json
    certify    --model model.json --tol TOL --out cert.json
    train      --arch csode|icode --benchmark b1|b2 [--config train.cfg] --out ckpt/
    simulate   --benchmark b1|b2 --method METHOD [--scenario lane_change|default] [--out DIR]
    experiment --suite table1|fig1|fig2|fig3|prop2|prop3 [--episodes N] --out results/
    version

Global flags (before the subcommand): ``--threads N``, ``--seed S``,
``--cache DIR``, ``--config FILE``. Exit status is 0 on success, 1 when a
certificate could not be produced or a suite verdict failed, 2 on usage
or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import __version__
from . import certify as cert
from . import harness as H
from . import koopman as kp
from . import neural as nn_
from .config import ConfigError, load_config
from .suites import run_suite, write_csv

__all__ = ["main", "build_parser"]


def build_parser():
    p = argparse.ArgumentParser(prog="safedyn", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=1, help="worker processes for episodes")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--cache", default=None, help="model cache directory")
    p.add_argument("--config", default=None, help="INI config file (see README for schema)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("identify", help="fit a lifted linear model by ridge EDMD")
    s.add_argument("--benchmark", choices=("b1", "b2"), required=True)
    s.add_argument("--degree", type=int, default=3)
    s.add_argument("--ridge", type=float, default=1e-6)
    s.add_argument("--out", required=True)

    s = sub.add_parser("certify", help="certify a lifted model's ISS gain")
    s.add_argument("--model", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train a certified latent ODE")
    s.add_argument("--arch", choices=("csode", "icode"), required=True)
    s.add_argument("--benchmark", choices=("b1", "b2"), required=True)
    s.add_argument("--config", dest="train_config", default=None)
    s.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run one closed-loop episode")
    s.add_argument("--benchmark", choices=("b1", "b2"), required=True)
    s.add_argument("--method", choices=[m.value for m in H.MethodId], required=True)
    s.add_argument("--scenario", choices=("lane_change", "default"), default="default")
    s.add_argument("--a-w", type=float, default=0.5)
    s.add_argument("--out", default=None, help="directory for the trajectory CSV")

    s = sub.add_parser("experiment", help="run an experiment suite")
    s.add_argument("--suite", choices=("table1", "fig1", "fig2", "fig3", "prop2", "prop3"),
                   required=True)
    s.add_argument("--episodes", type=int, default=None)
    s.add_argument("--out", required=True)

    sub.add_parser("version", help="print the package version")
    return p


def _settings(args):
    cfg = load_config(args.config) if args.config else None
    profile = cfg["profile"] if cfg else H.Profile()
    seed = args.seed if args.seed is not None else (cfg["experiment"].seed if cfg else 0)
    cache = args.cache or (cfg["experiment"].cache if cfg else None)
    return cfg, profile, seed, cache


def cmd_identify(args):
    _, profile, seed, _ = _settings(args)
    data = H.snapshot_data(args.benchmark, profile, seed)
    d = kp.Dictionary.polynomial(data.n, args.degree)
    model = kp.edmd_fit(data, d, args.ridge)
    model.meta["max_residual"] = kp.model_residual_max(model, data)
    with open(args.out, "w") as fh:
        fh.write(model.to_json())
    print(json.dumps({"out": args.out, "lifted_dim": int(model.A.shape[0]),
                      "residual": kp.model_residual(model, data)}))
    return 0


def cmd_certify(args):
    with open(args.model) as fh:
        model = kp.KoopmanModel.from_json(fh.read())
    try:
        c = cert.optimal_gain(model.A, model.E, args.tol)
    except (cert.Infeasible, cert.NonConvergenceError) as exc:
        print(json.dumps({"certified": False, "diagnosis": str(exc)}))
        return 1
    with open(args.out, "w") as fh:
        fh.write(c.to_json())
    print(json.dumps({"certified": True, "gamma_star": c.meta["gamma_star"], "gamma": c.gamma,
                      "margin": c.margin}))
    return 0


def cmd_train(args):
    cfg, profile, seed, _ = _settings(args)
    if args.train_config:
        cfg = load_config(args.train_config)
        profile = cfg["profile"]
    method = H.MethodId.CsodeIcodeMppi if args.arch == "icode" else H.MethodId.AblateNoIcode
    train_over = cfg["train"] if cfg and "train" in cfg.get("sections", ()) else None
    model, info = H.train_neural(args.benchmark, method, profile, seed, log=print,
                                 train_config=train_over)
    wd = H.window_data(args.benchmark, profile, seed)
    info["latent_eps_max"] = H.latent_eps_max(model, wd)
    c, why = H.certify_neural(model, wd, profile)
    if why:
        info["cert_failure"] = why
    nn_.save_checkpoint(model, args.out, {"info": info,
                                          "cert": json.loads(c.to_json()) if c else None})
    print(json.dumps({"out": args.out, "certified": c is not None,
                      "val_pred": info.get("val_pred"), "diagnosis": why}))
    return 0 if c is not None else 1


def cmd_simulate(args):
    _, profile, seed, cache = _settings(args)
    setup = H.benchmark_setup(args.benchmark, profile)
    art = H.build_method(args.benchmark, args.method, 0, profile, cache)
    s = H.episode_seeds(seed, 1)[0]
    over = {}
    if args.scenario == "lane_change" and args.benchmark == "b1":
        over = dict(wind_mean=0.0, wind_gust=0.0)
    sc = H.evaluation_scenario(args.benchmark, s, a_w=args.a_w, **over)
    r = H.run_episode(art, setup, sc, s, 0, keep=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        tr = r.traj
        err = setup.tracking_error(tr)
        n, m = tr.x.shape[1], tr.u.shape[1]
        write_csv(os.path.join(args.out, f"{args.benchmark}_{args.method}_trajectory.csv"),
                  ["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)] + ["error"],
                  [[tr.t[k], *tr.x[k], *tr.u[k], err[k]] for k in range(len(tr.t))])
    print(json.dumps({"rmse": r.rmse, "peak": r.peak, "steering_rate": r.smoothness,
                      "iss_rate": r.iss_rate, "failed": r.failed}))
    return 0


def cmd_experiment(args):
    _, profile, seed, cache = _settings(args)
    summary = run_suite(args.suite, args.out, args.episodes, seed, profile, cache,
                        workers=max(1, args.threads))
    print(json.dumps({"suite": args.suite, "pass": summary["pass"], "out": args.out}))
    return 0 if summary["pass"] else 1


COMMANDS = {"identify": cmd_identify, "certify": cmd_certify, "train": cmd_train,
            "simulate": cmd_simulate, "experiment": cmd_experiment}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "version":
        print(f"safedyn {__version__}")
        return 0
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(1)
    np.seterr(over="ignore")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
