"""Command-line entry point: ``ma2t <command> [options]``.

Every invocation writes one run directory ``<out>/<command>-<hash12>-s<seed>``
holding the resolved config (``config.toml``), ``run.json`` (seed, arguments,
git blob hashes of inputs, output list) and the command's outputs.

Exit codes: 0 success, 1 usage error, 2 config validation error, 3 runtime or
numeric failure. Failures print one ``ma2t: error[<kind>]: <reason>`` line to
standard error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import attacks as at
from . import config as cf
from . import evaluation as ev
from . import simulator as sm
from . import trainer as tr
from .dwaa import write_trajectory_csv
from .driving import build_dataset, load_dataset, save_dataset, sample_metrics
from .errors import ContractError, InfeasibleScenarioError, NumericError
from .pipeline import forward_with_noise
from .rng import Stream

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
FINETUNE_METHODS = {"ma2t": "ma2t", "fat": "fat", "pgd-l1": "pgd_l1", "pgd-l2": "pgd_l2",
                    "pgd-linf": "pgd_linf"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="TOML run configuration")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, default=Path("runs"), help="parent of the run directory")
    g.add_argument("--threads", type=int, default=1, help="parallel jobs for independent work")
    g.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ma2t", description="Module-wise adversarial training on a toy driving stack.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = [_common()]
    sub.add_parser("gen-data", parents=common, help="generate train/val datasets")
    p = sub.add_parser("pretrain", parents=common, help="clean pretraining")
    p.add_argument("--data", type=Path, required=True)
    p = sub.add_parser("finetune", parents=common, help="adversarial fine-tuning")
    p.add_argument("--method", choices=sorted(FINETUNE_METHODS), required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p = sub.add_parser("attack", parents=common, help="craft perturbations against a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", choices=["fgsm", "mifgsm", "pgd"])
    p.add_argument("--norm", choices=["l1", "l2", "linf"])
    p.add_argument("--objective", choices=["total_loss", "sub_loss", "plan_loss"])
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--module-wise", action="store_true", help="perturb all five sites")
    p.add_argument("--n-samples", type=int)
    for name in ("eval-whitebox", "eval-corruption"):
        p = sub.add_parser(name, parents=common)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--n-samples", type=int)
    p = sub.add_parser("eval-blackbox", parents=common)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--surrogate", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n-samples", type=int)
    p = sub.add_parser("simulate", parents=common, help="closed-loop rollouts, clean and attacked")
    p.add_argument("--checkpoint", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--attack-source", type=Path, help="checkpoint the universal noise is crafted on")
    p.add_argument("--data", type=Path, help="dataset used to craft the universal noise")
    p = sub.add_parser("report", parents=common, help="merge report bundles of earlier runs")
    p.add_argument("inputs", nargs="+", type=Path)
    return parser


# ------------------------------------------------------------------- helpers

def _blob(path: Path) -> str:
    return ev.git_blob_hash(Path(path).read_bytes())


def _split(path: Path, split: str) -> Path:
    path = Path(path)
    return path / f"{split}.npz" if path.is_dir() else path


def _named(spec: str) -> tuple:
    name, sep, path = spec.partition("=")
    return (name, Path(path)) if sep else (Path(spec).stem, Path(spec))


class Run:
    def __init__(self, args, cfg: dict, inputs: dict, params: dict):
        self.args, self.cfg, self.seed = args, cfg, args.seed
        self.inputs = {k: {"path": str(p), "git_hash": _blob(p)} for k, p in sorted(inputs.items())}
        self.params = params
        key = json.dumps({"command": args.command, "config": cfg, "params": params,
                          "inputs": {k: v["git_hash"] for k, v in self.inputs.items()}}, sort_keys=True)
        self.hash = hashlib.sha256(key.encode()).hexdigest()
        self.dir = args.out / f"{args.command}-{self.hash[:12]}-s{self.seed}"
        self.outputs = []

    def open(self) -> "Run":
        if self.dir.exists():
            if not self.args.force:
                raise FileExistsError(f"run directory {self.dir} exists; pass --force to overwrite")
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        return self

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def close(self) -> None:
        (self.dir / "config.toml").write_text(cf.dump_config(self.cfg))
        meta = {"command": self.args.command, "seed": self.seed, "params": self.params,
                "config_hash": self.hash, "inputs": self.inputs, "outputs": sorted(self.outputs)}
        (self.dir / "run.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        print(self.dir)


def _train_attack(cfg: dict, method: str) -> at.AttackConfig:
    t = cfg["train"]
    if method == "ma2t":
        return at.AttackConfig("pgd", "linf", dict(t["budgets"]), steps=t["attack_steps"],
                               restarts=t["attack_restarts"])
    if method == "fat":
        return at.AttackConfig("fgsm", "linf", {"Images": t["baseline_eps"]}, steps=1, restarts=1)
    norm = method[len("pgd_"):]
    return at.AttackConfig("pgd", norm, {"Images": at.image_budget(t["baseline_eps"], norm)},
                           steps=t["attack_steps"], restarts=t["attack_restarts"])


def _attack_config(cfg: dict, args=None) -> at.AttackConfig:
    a = dict(cfg["attack"])
    if args is not None:
        for key in ("method", "norm", "objective", "eps", "steps", "restarts"):
            if getattr(args, key, None) is not None:
                a[key] = getattr(args, key)
        a["module_wise"] = a["module_wise"] or getattr(args, "module_wise", False)
    if a["module_wise"]:
        budgets = dict(a["budgets"])
    else:
        budgets = {"Images": at.image_budget(a["eps"], a["norm"])}
    steps = 1 if a["method"] == "fgsm" else a["steps"]
    step_size = {s: a["step_fraction"] * e for s, e in budgets.items() if e > 0}
    return at.AttackConfig(a["method"], a["norm"], budgets, steps=steps, step_size=step_size,
                           restarts=a["restarts"], momentum=a["momentum"], objective=a["objective"])


def _eval_samples(cfg: dict, args) -> int | None:
    n = args.n_samples if getattr(args, "n_samples", None) is not None else cfg["eval"]["n_samples"]
    return n or None


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg):
    run = Run(args, cfg, {}, {}).open()
    train, val = build_dataset(cf.dataset_config(cfg, args.seed))
    save_dataset(run.path("train.npz"), train)
    save_dataset(run.path("val.npz"), val)
    run.close()


def _emit_training(run: Run, result: tr.TrainResult) -> None:
    result.checkpoint.save(run.path("checkpoint.ckpt"))
    with open(run.path("batches.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(tr.BATCH_COLUMNS)
        for row in result.batch_log:
            writer.writerow([row["batch"]] + [repr(float(row[m])) for m in tr.MODULE_IDS]
                            + [repr(float(row["total"])), row["skipped"]])
    if result.dwaa is not None:
        write_trajectory_csv(run.path("dwaa_weights.csv"), result.dwaa)


def cmd_pretrain(args, cfg):
    data = _split(args.data, "train")
    run = Run(args, cfg, {"data": data}, {}).open()
    t = cfg["train"]
    tcfg = tr.TrainConfig("clean", epochs=t["pretrain_epochs"], batch_size=t["batch_size"],
                          learning_rate=t["pretrain_learning_rate"], optimizer=t["optimizer"],
                          frozen=tuple(t["frozen"]), seed=args.seed)
    result = tr.pretrain_clean(load_dataset(data), tcfg,
                               model_seed=args.seed + cfg["model"]["init_seed_offset"])
    _emit_training(run, result)
    run.close()


def cmd_finetune(args, cfg):
    data = _split(args.data, "train")
    method = FINETUNE_METHODS[args.method]
    run = Run(args, cfg, {"data": data, "checkpoint": args.checkpoint}, {"method": method}).open()
    t, d = cfg["train"], cfg["dwaa"]
    tcfg = tr.TrainConfig(method, epochs=t["finetune_epochs"], batch_size=t["batch_size"],
                          learning_rate=t["finetune_learning_rate"], optimizer=t["optimizer"],
                          attack=_train_attack(cfg, method),
                          dwaa_enabled=d["enabled"] and method == "ma2t", dwaa_r=d["r"],
                          update_period=d["update_period"], frozen=tuple(t["frozen"]), seed=args.seed)
    result = tr.finetune(tr.Checkpoint.load(args.checkpoint), load_dataset(data), tcfg)
    _emit_training(run, result)
    run.close()


def cmd_attack(args, cfg):
    data = _split(args.data, "val")
    acfg = _attack_config(cfg, args)
    params = {"attack": acfg.describe(), "n_samples": args.n_samples}
    run = Run(args, cfg, {"data": data, "checkpoint": args.checkpoint}, params).open()
    model = tr.Checkpoint.load(args.checkpoint).to_pipeline()
    model.set_requires_grad(False)
    ds = load_dataset(data)
    n = min(args.n_samples or len(ds), len(ds))
    obs, labels = ds.batch(np.arange(n))
    pert = at.run_attack(model, obs, labels, acfg, Stream(args.seed, "attack"))
    at.save_perturbation(run.path("perturbation.pert"), pert)
    clean, _ = forward_with_noise(model, obs, labels)
    attacked, _ = forward_with_noise(model, obs, labels, pert.as_noise())
    summary = {}
    for name, heads in (("clean", clean), ("attacked", attacked)):
        metrics = sample_metrics(heads, labels)
        summary[name] = {m: float(np.nanmean(v)) if np.isfinite(v).any() else 0.0
                         for m, v in metrics.items()}
    run.path("summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    run.close()


def _eval_run(args, cfg, inputs, params, build):
    run = Run(args, cfg, inputs, params).open()
    matrix = build()
    ev.emit_report([matrix], {"command": args.command, "seed": args.seed, "config": cfg,
                              "params": params}, run.dir, inputs=inputs)
    run.outputs += [f"{matrix.name}.csv", "report.json"]
    run.close()


def cmd_eval_whitebox(args, cfg):
    data = _split(args.data, "val")
    e = cfg["eval"]
    attacks = ev.standard_attacks(cfg["attack"]["eps"], cfg["attack"]["steps"], e["restarts"])
    attacks.append(ev.module_attack("total_loss", cfg["attack"]["steps"], e["restarts"],
                                    cfg["attack"]["budgets"]))
    seeds = [args.seed + s for s in e["seeds"]]
    inputs = {"data": data, "checkpoint": args.checkpoint}
    _eval_run(args, cfg, inputs, {"n_samples": _eval_samples(cfg, args)}, lambda: ev.evaluate_whitebox(
        tr.Checkpoint.load(args.checkpoint), load_dataset(data), attacks, restarts=e["restarts"],
        seeds=seeds, n_samples=_eval_samples(cfg, args), batch_size=e["batch_size"],
        threads=args.threads))


def cmd_eval_blackbox(args, cfg):
    data = _split(args.data, "val")
    e = cfg["eval"]
    surrogates = dict(_named(s) for s in args.surrogate)
    attacks = ev.standard_attacks(cfg["attack"]["eps"], cfg["attack"]["steps"], e["restarts"])
    inputs = {"data": data, "checkpoint": args.checkpoint,
              **{f"surrogate:{k}": v for k, v in surrogates.items()}}
    seeds = [args.seed + s for s in e["seeds"]]
    _eval_run(args, cfg, inputs, {"n_samples": _eval_samples(cfg, args)}, lambda: ev.evaluate_blackbox(
        tr.Checkpoint.load(args.checkpoint), {k: tr.Checkpoint.load(v) for k, v in surrogates.items()},
        load_dataset(data), attacks, seeds=seeds, n_samples=_eval_samples(cfg, args),
        batch_size=e["batch_size"], threads=args.threads))


def cmd_eval_corruption(args, cfg):
    data = _split(args.data, "val")
    e = cfg["eval"]
    seeds = [args.seed + s for s in e["seeds"]]
    inputs = {"data": data, "checkpoint": args.checkpoint}
    _eval_run(args, cfg, inputs, {"n_samples": _eval_samples(cfg, args)}, lambda: ev.evaluate_corruption(
        tr.Checkpoint.load(args.checkpoint), load_dataset(data), e["corruptions"], e["severities"],
        seeds=seeds, n_samples=_eval_samples(cfg, args), batch_size=e["batch_size"],
        threads=args.threads))


def sim_config(cfg: dict, seed: int, delta=None) -> sm.SimConfig:
    s = cfg["sim"]
    return sm.SimConfig(s["episode_length"], s["n_episodes"], seed, s["collision_radius"],
                        s["target_distance"], s["speed_cap"], delta,
                        s["universal_eps"] if delta is not None else None)


def cmd_simulate(args, cfg):
    victims = dict(_named(c) for c in args.checkpoint)
    source = args.attack_source or next(iter(victims.values()))
    eps = cfg["sim"]["universal_eps"]
    inputs = {**{f"checkpoint:{k}": v for k, v in victims.items()}, "attack_source": source}
    if eps > 0:
        if args.data is None:
            raise UsageError("simulate with universal_eps > 0 needs --data to craft the noise")
        inputs["data"] = _split(args.data, "train")
    run = Run(args, cfg, inputs, {}).open()
    delta = None
    if eps > 0:
        model = tr.Checkpoint.load(source).to_pipeline()
        delta = at.universal_noise(model, load_dataset(inputs["data"]), eps,
                                   epochs=cfg["sim"]["universal_epochs"], seed=args.seed)
        np.save(run.path("universal_delta.npy"), delta)
    scfg = sim_config(cfg, args.seed, delta)
    rows = []
    for name, path in victims.items():
        ck = tr.Checkpoint.load(path)
        conditions = [("clean", sim_config(cfg, args.seed))] + ([("attacked", scfg)] if delta is not None else [])
        for cond, c in conditions:
            result = sm.run_closed_loop(ck, c)
            sm.write_trace_csv(run.path(f"trace_{name}_{cond}.csv"), result)
            rows.append({"checkpoint": name, "condition": cond, **result.summary()})
    run.path("simulation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    run.close()


def cmd_report(args, cfg):
    bundles = {}
    for d in args.inputs:
        path = d / "report.json" if d.is_dir() else d
        bundles[str(path)] = path
    run = Run(args, cfg, bundles, {}).open()
    matrices, metadata, hashes = [], {}, {}
    for label, path in bundles.items():
        b = ev.load_report(path)
        matrices += [ev.EvalMatrix.from_dict(m) for m in b["matrices"]]
        metadata[label] = b["metadata"]
        hashes.update(b["input_hashes"])
    names = [m.name for m in matrices]
    if len(set(names)) != len(names):  # keep every matrix addressable
        for i, m in enumerate(matrices):
            m.name = f"{m.name}-{i}"
    ev.emit_report(matrices, {"sources": metadata}, run.dir)
    run.outputs += [f"{m.name}.csv" for m in matrices] + ["report.json"]
    bundle = json.loads((run.dir / "report.json").read_text())
    bundle["input_hashes"] = {**hashes, **{k: v["git_hash"] for k, v in run.inputs.items()}}
    ev.validate_report(bundle)
    (run.dir / "report.json").write_text(json.dumps(bundle, sort_keys=True, indent=2) + "\n")
    run.close()


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "attack": cmd_attack, "eval-whitebox": cmd_eval_whitebox, "eval-blackbox": cmd_eval_blackbox,
            "eval-corruption": cmd_eval_corruption, "simulate": cmd_simulate, "report": cmd_report}


def _fail(code: int, kind: str, message: str) -> int:
    print(f"ma2t: error[{kind}]: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
    except UsageError as err:
        print(parser.format_usage(), end="")
        return _fail(EXIT_USAGE, "usage", err)
    try:
        cfg = cf.load_config(args.config)
    except cf.ConfigError as err:
        return _fail(EXIT_CONFIG, "config", err)
    except OSError as err:
        return _fail(EXIT_CONFIG, "config", err)
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as err:
        return _fail(EXIT_USAGE, "usage", err)
    except (ContractError, NumericError, InfeasibleScenarioError, OSError, KeyError) as err:
        return _fail(EXIT_RUNTIME, "runtime", f"{type(err).__name__}: {err}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
