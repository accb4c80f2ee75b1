"""Command line entry point: ``cailab <command> [--config F] [--set k=v ...]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from .cai import CaiConfig, cai_and_entropy_scores
from .density import GaussianTransitionModel
from .detect_eval import LabeledDataset, collect_mixed, noise_sweep
from .env_slide import OBJECT_IDX
from .nn import load_checkpoint, save_checkpoint
from .rl.train import CURVE_COLUMNS, VARIANTS, Trainer

logger = logging.getLogger("cailab")

METRIC_COLUMNS = ("scorer", "noise_level", "auc", "ap", "f1", "threshold", "n", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_csv(path, rows, columns):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)
    return path


def _need_path(cfg, key):
    value = cfg[key]
    if not value:
        raise UsageError(f"config key {key!r} is required")
    if not Path(value).exists():
        raise UsageError(f"{key} file not found: {value}")
    return Path(value)


def save_model(model, path, seed, **extra):
    rec = model.to_checkpoint()
    meta = dict(rec["meta"], **extra)
    return save_checkpoint(path, rec["nets"], rec["normalizer"], seed=seed, meta=meta)


def load_model(path):
    try:
        return GaussianTransitionModel.from_checkpoint(load_checkpoint(path))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"{path}: not a density model checkpoint ({exc})") from exc


# -- commands --------------------------------------------------------------

def cmd_collect(cfg, out):
    params = C.slide_params(cfg["env"])
    rng = np.random.default_rng(cfg["seed"])
    data = collect_mixed(params, int(cfg["episodes"]), rng, kinds=tuple(cfg["policies"]))
    data.to_jsonl(out / "dataset.jsonl")
    kinds = {k: data.provenance.count(k) for k in cfg["policies"]}
    manifest = {"n_transitions": len(data), "n_episodes": len(data.provenance),
                "n_positive": int(data.labels.sum()), "positive_rate": data.positive_rate,
                "episodes_by_policy": kinds, "seed": cfg["seed"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"collected {len(data)} transitions, positive rate {data.positive_rate:.4f}")


def cmd_train_model(cfg, out):
    data = LabeledDataset.from_jsonl(_need_path(cfg, "dataset"))
    X = data.model_inputs()
    y = data.model_targets(OBJECT_IDX, scale=cfg["target_scale"])
    if cfg["resume"]:
        model = load_model(_need_path(cfg, "resume"))
        model.set_params(warm_start=True, max_epochs=int(cfg["model"]["max_epochs"]))
    else:
        params = dict(cfg["model"], hidden=tuple(cfg["model"]["hidden"]))
        model = GaussianTransitionModel(random_state=cfg["seed"], **params)
    model.fit(X, y, groups=data.episode_id,
              callback=lambda e, m: logger.info("epoch %d val mse %.4g", e, m))
    save_model(model, out / "model.json", cfg["seed"], target_scale=cfg["target_scale"])
    _write_csv(out / "train_log.csv", [{"epoch": e, "val_mse": m} for e, m in model.history_],
               ("epoch", "val_mse"))
    print(f"trained to epoch {model.epochs_}, best val mse {model.best_mse_:.4g}")


def cmd_eval_detect(cfg, out):
    model = load_model(_need_path(cfg, "model"))
    data = LabeledDataset.from_jsonl(_need_path(cfg, "dataset"))
    unknown = set(cfg["scorers"]) - {"cai", "entropy"}
    if unknown:
        raise UsageError(f"unknown scorers {sorted(unknown)}")
    if data.labels.all() or not data.labels.any():
        raise RuntimeError("evaluation data must contain both positive and negative labels")
    curves = []
    rows = noise_sweep(model, data, sorted(cfg["noise_levels"]), CaiConfig(int(cfg["n_actions"])),
                       seed=cfg["seed"], curves=curves)
    keep = set(cfg["scorers"])
    rows = [r for r in rows if r["scorer"] in keep]
    _write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    for kind, (xn, yn) in (("roc", ("fpr", "tpr")), ("pr", ("recall", "precision"))):
        pts = [{"scorer": c["scorer"], "noise_level": c["noise_level"], "seed": c["seed"], xn: x, yn: v}
               for c in curves if c["scorer"] in keep for x, v in zip(*c[kind])]
        _write_csv(out / f"{kind}_curve.csv", pts, ("scorer", "noise_level", "seed", xn, yn))
    for r in rows:
        print(f"{r['scorer']:8s} noise {r['noise_level']:.2f}  auc {r['auc']:.4f}  ap {r['ap']:.4f}  "
              f"f1 {r['f1']:.4f}")


def cmd_score(cfg, out):
    model = load_model(_need_path(cfg, "model"))
    path = _need_path(cfg, "states")
    ids, states = [], []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip():
            continue
        rec = json.loads(line)
        s = rec.get("s", rec.get("state"))
        if s is None:
            raise UsageError(f"{path}:{i + 1}: no 's' or 'state' field")
        ids.append(rec.get("state_id", len(ids)))
        states.append(s)
    if not states:
        raise UsageError(f"{path}: no states")
    cai, ent = cai_and_entropy_scores(model, np.asarray(states, dtype=float),
                                      CaiConfig(int(cfg["n_actions"])), np.random.default_rng(cfg["seed"]))
    with (out / "scores.jsonl").open("w") as fh:
        for sid, c, e in zip(ids, cai, ent):
            fh.write(json.dumps({"state_id": sid, "cai": float(c), "entropy": float(e)}) + "\n")
    print(f"scored {len(ids)} states")


def resume_with(trainer, cfg):
    """Adopt a new episode budget or stop threshold; any other change is refused."""
    old = replace(trainer.cfg, n_episodes=cfg.n_episodes, stop_at=cfg.stop_at)
    if old != cfg:
        raise UsageError(f"checkpoint for {trainer.variant} seed {trainer.seed} was made with other settings")
    trainer.cfg = cfg
    last = trainer.curve[-1]["success_rate"] if trainer.curve else None
    hit = cfg.stop_at is not None and last is not None and last >= cfg.stop_at
    trainer.done = hit or trainer.episode >= cfg.n_episodes


def _rl_job(train_cfg, variant, seed, ckpt_dir):
    ckpt = Path(ckpt_dir) / f"{variant}_seed{seed}.pkl"
    cfg = C.train_config(train_cfg)
    if ckpt.exists():
        trainer = Trainer.load(ckpt)
        resume_with(trainer, cfg)
        logger.info("resuming %s seed %d at episode %d", variant, seed, trainer.episode)
    else:
        trainer = Trainer(cfg, variant, seed)
    curve_path = Path(ckpt_dir) / f"{variant}_seed{seed}.csv"
    trainer.run(checkpoint=ckpt,
                on_eval=lambda row: _write_csv(curve_path, trainer.curve, CURVE_COLUMNS))
    trainer.save(ckpt)
    _write_csv(curve_path, trainer.curve, CURVE_COLUMNS)
    agent = trainer.agent
    save_checkpoint(Path(ckpt_dir) / f"{variant}_seed{seed}_policy.json",
                    {"actor": agent.actor, "critic": agent.critic}, agent.obs_norm, seed=seed,
                    meta={"variant": variant, "episode": trainer.episode,
                          "goal_normalizer": agent.goal_norm.to_dict()})
    return trainer.curve


def cmd_train_rl(cfg, out, workers=1):
    unknown = set(cfg["variants"]) - set(VARIANTS)
    if unknown:
        raise UsageError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANTS)}")
    C.train_config(cfg["train"])  # validate before spawning
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    jobs = [(v, int(s)) for v in cfg["variants"] for s in cfg["seeds"]]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_rl_job, cfg["train"], v, s, ckpt_dir) for v, s in jobs]
            curves = [f.result() for f in futures]
    else:
        curves = [_rl_job(cfg["train"], v, s, ckpt_dir) for v, s in jobs]
    rows = [r for curve in curves for r in curve]
    _write_csv(out / "learning_curve.csv", rows, CURVE_COLUMNS)
    for (v, s), curve in zip(jobs, curves):
        last = curve[-1]
        print(f"{v} seed {s}: episode {last['episode']} success {last['success_rate']:.2f}")


COMMANDS = {
    "collect": (cmd_collect, "roll out policies and write a labelled transition dataset"),
    "train-model": (cmd_train_model, "fit the Gaussian transition model on a dataset"),
    "eval-detect": (cmd_eval_detect, "score a labelled dataset and report detection metrics"),
    "score": (cmd_score, "write influence and entropy scores for a file of states"),
    "train-rl": (cmd_train_rl, "train DDPG+HER agents and write learning curves"),
}


def build_parser():
    parser = _Parser(prog="cailab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML file with settings")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a setting, dotted keys for nested tables (repeatable)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        if name == "train-rl":
            p.add_argument("--seeds", help="comma separated seeds (overrides --seed)")
            p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = C.resolve(args.command, args.config, args.overrides)
        if args.command == "train-rl":
            if args.seeds:
                try:
                    cfg["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
                except ValueError as exc:
                    raise UsageError(f"bad --seeds {args.seeds!r}") from exc
            elif args.seed is not None:
                cfg["seeds"] = [args.seed]
            if args.workers < 1:
                raise UsageError("--workers must be >= 1")
        elif args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        C.write_snapshot(cfg, out / "config.toml")
        func = COMMANDS[args.command][0]
        if args.command == "train-rl":
            func(cfg, out, args.workers)
        else:
            func(cfg, out)
    except (C.ConfigError, UsageError) as exc:
        print(f"cailab: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"cailab: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
