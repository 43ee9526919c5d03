"""``eaq`` command line: data generation, diffusion training, augmentation, offline MARL, evaluation.

Every stage writes into its ``--out`` directory together with ``manifest.json``,
which records the config hash, seeds, and sha256 of every input and output.
Re-running a stage whose manifest matches is a no-op unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
import zlib
from dataclasses import fields
from functools import partial
from pathlib import Path

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout

from .diffusion import DiffusionModel, TrainConfig, write_log_csv
from .diffusion import train as train_diffusion
from .episode_data import DatasetMeta, downsample_dataset, layout_for, read_episode_file, save_episodes, tensorize
from .marl import (
    EnvConfig,
    GreedyPolicy,
    LearnerConfig,
    available_actions,
    cooperation_metric,
    coverage_statistic,
    evaluate,
    generate_offline_dataset,
    train_offline,
)
from .rad import RadConfig, rad_dataset
from .sampler import augment, decode_and_filter, sample_trajectories

log = logging.getLogger("eaq")

DEFAULT_CONFIG = {
    "env": {"n_allies": 3, "n_enemies": 3, "grid": 5, "enemy_hp": 3, "ally_hp": 4, "T_max": 30,
            "damage_reward": 0.1, "kill_reward": 1.0, "win_reward": 20.0},
    "dataset": {"policy": "poor", "num_episodes": 1000, "fraction": 0.03, "gamma": 0.99},
    "diffusion": {"lambda": 0.1, "lambda_grid": [0.5, 0.1, 0.01], "epochs": 5000, "batch_size": 32,
                  "lr": 2e-4, "K": 1000, "beta_start": 1e-4, "beta_end": 0.02, "dim": 32,
                  "dim_mults": [1, 2, 4], "q_space": "normalized"},
    "sampler": {"scale": 5, "recompute_rtg": True, "batch_size": 256},
    "rad": {"alpha": 0.8, "beta": 1.2},
    "learner": {"regularizer": "cql", "cql_weight": 10.0, "bcq_threshold": 0.3, "gamma": 0.99, "lr": 5e-4,
                "batch_size": 64, "target_period": 200, "hidden": 64, "mixer_embed": 32,
                "grad_clip": 10.0, "double_q": True, "iterations": 3000},
    "eval": {"episodes": 50, "num_seeds": 1},
}

AUGMENTERS = ("eaq", "eaq-noq", "rad-s", "rad-m", "none")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


def load_config(path):
    """Read a YAML config and fill per-key defaults.

    Every section must be present; unknown keys and wrongly typed values are
    rejected with the dotted key name.
    """
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError("config must be a mapping of sections")
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for section in user:
        if section not in cfg:
            raise ConfigError(f"unknown config key '{section}'")
    for section, defaults in cfg.items():
        if section not in user:
            raise ConfigError(f"missing config key '{section}'")
        values = user[section] or {}
        if not isinstance(values, dict):
            raise ConfigError(f"config key '{section}' must be a mapping")
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            want = defaults[key]
            if value is None:
                raise ConfigError(f"missing value for config key '{section}.{key}'")
            if isinstance(want, bool) != isinstance(value, bool) or (
                isinstance(want, (int, float)) and not isinstance(value, (int, float))
            ) or (isinstance(want, (str, list)) and not isinstance(value, type(want))):
                raise ConfigError(f"config key '{section}.{key}' has wrong type {type(value).__name__}")
            if isinstance(want, float):
                value = float(value)
            defaults[key] = value
    return cfg


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def stage_seed(root, name):
    """Deterministic child seed for a named stage."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


def env_config(cfg):
    return EnvConfig(**cfg["env"])


def diffusion_config(cfg, seed, lam=None):
    d = dict(cfg["diffusion"])
    default_lam = d.pop("lambda")
    lam = default_lam if lam is None else lam
    d.pop("lambda_grid")
    d["dim_mults"] = tuple(d["dim_mults"])
    return TrainConfig(lam=float(lam), seed=seed, gamma=cfg["dataset"]["gamma"], **d)


def learner_config(cfg):
    names = {f.name for f in fields(LearnerConfig)}
    return LearnerConfig(**{k: v for k, v in cfg["learner"].items() if k in names})


# ---------------------------------------------------------------- stage runner


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Lock, skip-if-current, run, clean up on failure, then write the manifest."""

    def __init__(self, name, out, cfg, seed, params, inputs, force=False):
        self.name = name
        self.out = Path(out)
        self.cfg = cfg
        self.seed = seed
        self.params = params
        self.inputs = {str(Path(p)): None for p in inputs}
        self.force = force
        self.outputs = []
        self.manifest_path = self.out / "manifest.json"

    def output(self, filename):
        path = self.out / filename
        self.outputs.append(path)
        return path

    def _record(self):
        for p in self.inputs:
            if not Path(p).is_file():
                raise StageError(f"input file not found: {p}")
            self.inputs[p] = sha256_file(p)
        return {
            "stage": self.name,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "seed": self.seed,
            "params": self.params,
            "inputs": self.inputs,
        }

    def _current(self, record):
        if self.force or not self.manifest_path.is_file():
            return False
        try:
            old = json.loads(self.manifest_path.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        if {k: old.get(k) for k in record} != record:
            return False
        return all((self.out / f).is_file() and sha256_file(self.out / f) == h
                   for f, h in old.get("outputs", {}).items())

    def run(self, fn):
        """Call ``fn(stage)``; returns the manifest dict."""
        self.out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(self.out / ".eaq.lock"), timeout=0)
        try:
            lock.acquire()
        except Timeout:
            raise StageError(f"{self.out} is locked by another eaq run") from None
        try:
            record = self._record()
            if self._current(record):
                log.info("%s: up to date in %s", self.name, self.out)
                return json.loads(self.manifest_path.read_text())
            self.manifest_path.unlink(missing_ok=True)
            try:
                fn(self)
            except BaseException:
                for p in self.outputs:
                    p.unlink(missing_ok=True)
                raise
            record["outputs"] = {p.name: sha256_file(p) for p in self.outputs}
            tmp = self.manifest_path.with_suffix(".tmp")
            tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
            tmp.replace(self.manifest_path)
            log.info("%s: wrote %s", self.name, ", ".join(p.name for p in self.outputs))
            return record
        finally:
            lock.release()


def _meta_for(cfg, episodes=None):
    ec = env_config(cfg)
    return DatasetMeta(ec.obs_dim, ec.num_actions, ec.T_max, cfg["dataset"]["gamma"],
                       {"env": cfg["env"]})


def _load(path):
    meta, episodes = read_episode_file(path)
    if not episodes:
        raise StageError(f"{path} contains no episodes")
    return meta, episodes


# ---------------------------------------------------------------- stages


def do_gen_data(cfg, seed, out, policy, force=False):
    s = stage_seed(seed, "gen-data")
    n = cfg["dataset"]["num_episodes"]

    def body(st):
        eps = generate_offline_dataset(env_config(cfg), policy, n, s, cfg["dataset"]["gamma"])
        save_episodes(eps, st.output("episodes.jsonl"), _meta_for(cfg))

    return Stage("gen-data", out, cfg, seed, {"policy": policy, "num_episodes": n, "stage_seed": s},
                 [], force).run(body)


def do_downsample(cfg, seed, out, data, fraction, force=False):
    s = stage_seed(seed, "downsample")

    def body(st):
        meta, eps = _load(data)
        save_episodes(downsample_dataset(eps, fraction, s), st.output("episodes.jsonl"), meta)

    return Stage("downsample", out, cfg, seed, {"fraction": fraction, "stage_seed": s}, [data], force).run(body)


def do_train_diffusion(cfg, seed, out, data, lam, force=False):
    s = stage_seed(seed, "train-diffusion")
    tc = diffusion_config(cfg, s, lam)

    def body(st):
        meta, eps = _load(data)
        layout = layout_for(eps, meta.num_actions if meta else env_config(cfg).num_actions,
                            meta.T_max if meta else None)
        model = train_diffusion(tensorize(eps, layout), tc)
        model.save(st.output("model.ckpt"))
        write_log_csv(model.log, st.output("train_log.csv"))

    return Stage("train-diffusion", out, cfg, seed, {"lambda": tc.lam, "stage_seed": s}, [data],
                 force).run(body)


def do_sample(cfg, seed, out, model_path, count, force=False):
    s = stage_seed(seed, "sample")

    def body(st):
        model = DiffusionModel.load(model_path)
        raw = sample_trajectories(model, count, s, cfg["sampler"]["batch_size"])
        eps, dropped = decode_and_filter(raw, model.layout, model.stats, cfg["dataset"]["gamma"],
                                         cfg["sampler"]["recompute_rtg"])
        for e in eps:
            e.source = "synthetic"
        save_episodes(eps, st.output("episodes.jsonl"), _meta_for(cfg))

    return Stage("sample", out, cfg, seed, {"count": count, "stage_seed": s}, [model_path], force).run(body)


def do_augment(cfg, seed, out, data, model_path, scale, force=False):
    s = stage_seed(seed, "augment")

    def body(st):
        meta, eps = _load(data)
        model = DiffusionModel.load(model_path)
        aug = augment(eps, model, scale, s, cfg["dataset"]["gamma"], cfg["sampler"]["recompute_rtg"])
        save_episodes(aug, st.output("episodes.jsonl"), meta)

    return Stage("augment", out, cfg, seed, {"scale": scale, "stage_seed": s}, [data, model_path],
                 force).run(body)


def do_rad(cfg, seed, out, data, mode, scale, force=False):
    s = stage_seed(seed, "rad")
    rc = RadConfig(cfg["rad"]["alpha"], cfg["rad"]["beta"], mode, s)

    def body(st):
        meta, eps = _load(data)
        save_episodes(rad_dataset(eps, rc, scale), st.output("episodes.jsonl"), meta)

    return Stage("rad", out, cfg, seed, {"mode": mode, "scale": scale, "stage_seed": s}, [data],
                 force).run(body)


def _avail(cfg):
    return partial(available_actions, config=env_config(cfg))


def do_train_marl(cfg, seed, out, data, regularizer=None, force=False):
    s = stage_seed(seed, "train-marl")
    lc = learner_config(cfg)
    if regularizer is not None:
        lc = LearnerConfig(**{**lc.to_dict(), "regularizer": regularizer})
    iters = cfg["learner"]["iterations"]

    def body(st):
        _, eps = _load(data)
        torch.set_num_threads(1)
        res = train_offline(lc, eps, iters, s, env_config(cfg).num_actions, _avail(cfg))
        res.policy.save(st.output("policy.pt"), extra={"learner": lc.to_dict()})
        with open(st.output("losses.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows((i, repr(v)) for i, v in enumerate(res.losses))

    return Stage("train-marl", out, cfg, seed, {"learner": lc.to_dict(), "iterations": iters, "stage_seed": s},
                 [data], force).run(body)


EVAL_COLUMNS = ["scenario", "augmentation", "seed", "mean_return", "std", "cooperation_fraction", "coverage"]


def _eval_rows(cfg, seed, policies, augmentation, data=None, reference=None):
    ec = env_config(cfg)
    coverage = ""
    if data is not None and reference is not None:
        coverage = coverage_statistic(_load(reference)[1], _load(data)[1])
    rows = []
    for learner_seed, path in policies:
        policy = GreedyPolicy.load(path, _avail(cfg))
        res = evaluate(policy, ec, cfg["eval"]["episodes"], stage_seed(seed, "eval"))
        coop = cooperation_metric(res.episodes, ec.n_enemies, ec.alive_index)
        rows.append({"scenario": ec.scenario, "augmentation": augmentation, "seed": learner_seed,
                     "mean_return": res.mean_return, "std": res.std_return,
                     "cooperation_fraction": "" if coop is None else coop, "coverage": coverage})
    return rows


def _write_eval_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def do_eval(cfg, seed, out, policy_path, augmentation, data=None, reference=None, force=False):
    inputs = [policy_path] + [p for p in (data, reference) if p is not None]

    def body(st):
        rows = _eval_rows(cfg, seed, [(seed, policy_path)], augmentation, data, reference)
        _write_eval_csv(rows, st.output("eval.csv"))

    return Stage("eval", out, cfg, seed, {"augmentation": augmentation}, inputs, force).run(body)


def do_metrics(cfg, seed, out, data, reference=None, force=False):
    inputs = [data] + ([reference] if reference else [])

    def body(st):
        meta, eps = _load(data)
        ec = env_config(cfg)
        coop = cooperation_metric(eps, ec.n_enemies, ec.alive_index)
        sources = {}
        for e in eps:
            sources[e.source or "unknown"] = sources.get(e.source or "unknown", 0) + 1
        result = {
            "num_episodes": len(eps),
            "sources": sources,
            "mean_return": float(np.mean([e.episode_return for e in eps])),
            "mean_length": float(np.mean([e.length for e in eps])),
            "cooperation_fraction": coop,
        }
        if reference:
            result["coverage"] = coverage_statistic(_load(reference)[1], eps)
        st.output("metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")

    return Stage("metrics", out, cfg, seed, {}, inputs, force).run(body)


def do_run_all(cfg, seed, out, policy, augmenter, lam=None, scale=None, fraction=None, force=False):
    """Generate, downsample, augment, train learners and evaluate for one (scenario, policy, augmenter)."""
    out = Path(out)
    scale = cfg["sampler"]["scale"] if scale is None else scale
    fraction = cfg["dataset"]["fraction"] if fraction is None else fraction
    do_gen_data(cfg, seed, out / "raw", policy, force)
    original = out / "original" / "episodes.jsonl"
    do_downsample(cfg, seed, out / "original", out / "raw" / "episodes.jsonl", fraction, force)

    train_data = original
    if augmenter in ("eaq", "eaq-noq"):
        lam_used = 0.0 if augmenter == "eaq-noq" else lam
        do_train_diffusion(cfg, seed, out / "diffusion", original, lam_used, force)
        do_augment(cfg, seed, out / "augmented", original, out / "diffusion" / "model.ckpt", scale, force)
        train_data = out / "augmented" / "episodes.jsonl"
    elif augmenter in ("rad-s", "rad-m"):
        do_rad(cfg, seed, out / "augmented", original, "single" if augmenter == "rad-s" else "multi", scale, force)
        train_data = out / "augmented" / "episodes.jsonl"

    policies = []
    for i in range(cfg["eval"]["num_seeds"]):
        learner_seed = seed + i
        d = out / f"learner_{i}"
        do_train_marl(cfg, learner_seed, d, train_data, force=force)
        policies.append((learner_seed, d / "policy.pt"))

    def body(st):
        rows = _eval_rows(cfg, seed, policies, augmenter, train_data, original)
        _write_eval_csv(rows, st.output("eval.csv"))

    inputs = [p for _, p in policies] + [train_data, original]
    return Stage("run-all", out / "report", cfg, seed, {"augmenter": augmenter}, inputs, force).run(body)


# ---------------------------------------------------------------- argparse


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults used if omitted)")
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--out", type=Path, required=True, help="output directory for this stage")
    common.add_argument("--force", action="store_true", help="re-run even if the manifest is current")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="eaq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="roll out a behavior policy")
    g.add_argument("--policy", choices=["medium", "poor"])
    g.add_argument("--episodes", type=int, help="overrides dataset.num_episodes")

    d = sub.add_parser("downsample", parents=[common], help="keep a random fraction of episodes")
    d.add_argument("--data", type=Path, required=True)
    d.add_argument("--fraction", type=float)

    t = sub.add_parser("train-diffusion", parents=[common], help="fit the guided trajectory model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--grid", action="store_true", help="train one model per diffusion.lambda_grid entry")

    s = sub.add_parser("sample", parents=[common], help="draw synthetic episodes from a model")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--count", type=int, required=True)

    a = sub.add_parser("augment", parents=[common], help="real episodes plus scale x synthetic")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--model", type=Path, required=True)
    a.add_argument("--scale", type=int)

    r = sub.add_parser("rad", parents=[common], help="random amplitude scaling baseline")
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--augmenter", choices=["rad-s", "rad-m"], default="rad-s")
    r.add_argument("--scale", type=int)

    m = sub.add_parser("train-marl", parents=[common], help="offline QMIX with CQL or BCQ")
    m.add_argument("--data", type=Path, required=True)
    m.add_argument("--regularizer", choices=["cql", "bcq", "none"])

    e = sub.add_parser("eval", parents=[common], help="greedy rollouts of a trained policy")
    e.add_argument("--policy-file", type=Path, required=True)
    e.add_argument("--augmenter", choices=AUGMENTERS, default="none", help="label for the report")
    e.add_argument("--data", type=Path, help="training data, for the coverage column")
    e.add_argument("--reference", type=Path, help="original data, for the coverage column")

    x = sub.add_parser("metrics", parents=[common], help="dataset statistics")
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--reference", type=Path)

    ra = sub.add_parser("run-all", parents=[common], help="full pipeline for one augmenter")
    ra.add_argument("--policy", choices=["medium", "poor"])
    ra.add_argument("--augmenter", choices=AUGMENTERS, default="eaq")
    ra.add_argument("--lambda", dest="lam", type=float)
    ra.add_argument("--scale", type=int)
    ra.add_argument("--fraction", type=float)
    return p


def _check_positive(name, value, lo=0.0, hi=None):
    if value is None:
        return
    if value <= lo or (hi is not None and value > hi):
        raise ConfigError(f"--{name} out of range: {value}")


def dispatch(args):
    cfg = load_config(args.config)
    cmd = args.command
    if getattr(args, "episodes", None) is not None:
        _check_positive("episodes", args.episodes)
        cfg["dataset"]["num_episodes"] = args.episodes
    if getattr(args, "policy", None) is not None:
        cfg["dataset"]["policy"] = args.policy
    if getattr(args, "fraction", None) is not None:
        _check_positive("fraction", args.fraction, hi=1.0)
        cfg["dataset"]["fraction"] = args.fraction
    if getattr(args, "scale", None) is not None:
        _check_positive("scale", args.scale)
        cfg["sampler"]["scale"] = args.scale
    if getattr(args, "lam", None) is not None:
        if args.lam < 0:
            raise ConfigError(f"--lambda must be >= 0, got {args.lam}")
        cfg["diffusion"]["lambda"] = args.lam
    scale = cfg["sampler"]["scale"]
    f = args.force

    if cmd == "gen-data":
        return do_gen_data(cfg, args.seed, args.out, cfg["dataset"]["policy"], f)
    if cmd == "downsample":
        return do_downsample(cfg, args.seed, args.out, args.data, cfg["dataset"]["fraction"], f)
    if cmd == "train-diffusion":
        if args.grid:
            return [do_train_diffusion(cfg, args.seed, args.out / f"lambda_{lam:g}", args.data, lam, f)
                    for lam in cfg["diffusion"]["lambda_grid"]]
        return do_train_diffusion(cfg, args.seed, args.out, args.data, None, f)
    if cmd == "sample":
        _check_positive("count", args.count)
        return do_sample(cfg, args.seed, args.out, args.model, args.count, f)
    if cmd == "augment":
        return do_augment(cfg, args.seed, args.out, args.data, args.model, scale, f)
    if cmd == "rad":
        return do_rad(cfg, args.seed, args.out, args.data,
                      "single" if args.augmenter == "rad-s" else "multi", scale, f)
    if cmd == "train-marl":
        return do_train_marl(cfg, args.seed, args.out, args.data, args.regularizer, f)
    if cmd == "eval":
        return do_eval(cfg, args.seed, args.out, args.policy_file, args.augmenter, args.data, args.reference, f)
    if cmd == "metrics":
        return do_metrics(cfg, args.seed, args.out, args.data, args.reference, f)
    if cmd == "run-all":
        return do_run_all(cfg, args.seed, args.out, cfg["dataset"]["policy"], args.augmenter,
                          cfg["diffusion"]["lambda"], scale, cfg["dataset"]["fraction"], f)
    raise ConfigError(f"unknown command {cmd!r}")  # argparse normally catches this


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (ConfigError, StageError, ValueError, OSError) as exc:
        print(f"eaq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
