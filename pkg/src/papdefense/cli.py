"""Batch command line: pretrain, train-prompts, evaluate, diagnose-spectra, attack.

Every command reads one YAML file (validated against ``config_schema.json``),
applies ``--set dotted.key=value`` overrides and writes its artifacts plus a
``manifest.json`` and ``run.log`` into a run directory. Without ``--run-dir``
the directory is ``$PAP_RUN_ROOT/<command>-<digest prefix>`` (``./runs`` when
the variable is unset).

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch
import yaml

from . import __version__
from .attacks import AttackConfig, AttackConfigError, get_attack
from .data import DataError, ImageBatch, load_desk_dataset, load_npz
from .evaluator import (
    EvalConfigError,
    evaluate,
    seeded_for_batch,
    spectrum_swap_diagnostic,
    write_plots,
)
from .models import (
    CheckpointError,
    build_reference_cnn,
    load_checkpoint,
    parameter_digest,
    pretrain_adversarial,
    pretrain_natural,
    save_checkpoint,
)
from .prompt_bank import PromptBank, PromptBankError
from .prompt_bank import load as load_bank
from .prompt_bank import save as save_bank
from .trainer import NumericError, TrainConfig, TrainConfigError, train_prompts

RUN_ROOT_ENV = "PAP_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("papdefense")

# attack seeds default to the run seed, so they are left out here
_ATTACK_DEFAULTS = {k: v for k, v in AttackConfig().to_dict().items() if k != "seed"}

DEFAULTS = {
    "seed": 0,
    "data": {"source": "desk", "seed": 0, "test_size": 1000, "train_path": None,
             "test_path": None, "limit_train": None, "limit_test": None},
    "paths": {"checkpoint": None, "bank": None},
    "pretrain": {"mode": "natural", "epochs": 12, "lr": 1e-3, "batch_size": 64,
                 "attack": _ATTACK_DEFAULTS},
    "train": {**{k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
              "attack": _ATTACK_DEFAULTS},
    "evaluate": {"attacks": ["pgd_linf"], "strategy": "predicted_label", "batch_size": 250,
                 "plots": False},
    "diagnose": {"attack": "pgd_linf", "batch_size": 250},
    "attack": {"name": "pgd_linf", "split": "test", "batch_size": 250},
}


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    text = resources.files("papdefense").joinpath("config_schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | os.PathLike | None, overrides=()) -> dict:
    """Defaults, then the file, then overrides; validated strictly."""
    user = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        _set_dotted(user, item)
    try:
        jsonschema.validate(user, _schema())
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None
    return _merge(DEFAULTS, user)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _attack_config(d: dict, seed: int) -> AttackConfig:
    d = dict(d)
    d.setdefault("seed", seed)
    return AttackConfig(**d)


def _load_data(cfg: dict) -> tuple[ImageBatch, ImageBatch, dict]:
    d = cfg["data"]
    if d["source"] == "desk":
        train, test, manifest = load_desk_dataset(d["seed"], d["test_size"])
    else:
        if not d["train_path"] or not d["test_path"]:
            raise ConfigError("data.source=npz needs data.train_path and data.test_path")
        train, test = load_npz(d["train_path"]), load_npz(d["test_path"])
        manifest = {"name": "npz", "splits": {"train": {"sha256": train.digest()},
                                              "test": {"sha256": test.digest()}}}
    if d["limit_train"]:
        train = train.subset(slice(0, d["limit_train"]))
    if d["limit_test"]:
        test = test.subset(slice(0, d["limit_test"]))
    return train, test, manifest


def _need_path(cfg: dict, key: str) -> Path:
    value = cfg["paths"][key]
    if not value:
        raise ConfigError(f"paths.{key} is required for this command")
    path = Path(value).expanduser().resolve()
    if not path.exists():
        raise FileNotFoundError(f"{key} not found: {path}")
    return path


def _load_bank(cfg: dict, model) -> PromptBank | None:
    value = cfg["paths"]["bank"]
    if value == "zero":
        return PromptBank.zeros(model.num_classes, model.input_shape)
    if value is None:
        return None
    return load_bank(_need_path(cfg, "bank"))


# -- commands -------------------------------------------------------------------

def cmd_pretrain(cfg, run_dir, digest):
    seed = cfg["seed"]
    p = cfg["pretrain"]
    train, test, data_manifest = _load_data(cfg)
    model = build_reference_cnn(train.image_shape, train.num_classes, seed=seed)
    if p["mode"] == "natural":
        model = pretrain_natural(model, train, p["epochs"], p["lr"], seed, p["batch_size"])
    else:
        model = pretrain_adversarial(model, train, _attack_config(p["attack"], seed), p["epochs"],
                                     p["lr"], seed, p["batch_size"])
    test_acc = evaluate(model, None, test, attacks=[], strategy="none").natural_accuracy
    extra = {"config_digest": digest, "seed": seed, "mode": p["mode"], "test_accuracy": test_acc,
             "dataset": data_manifest["splits"]}
    save_checkpoint(model, run_dir / "checkpoint", extra=extra)
    log.info("pretrain %s: train acc %.4f test acc %.4f", p["mode"], model.recorded_accuracy, test_acc)
    return {"checkpoint": "checkpoint", "train_accuracy": model.recorded_accuracy,
            "test_accuracy": test_acc, "backbone_digest": parameter_digest(model)}


def cmd_train_prompts(cfg, run_dir, digest):
    model = load_checkpoint(_need_path(cfg, "checkpoint"))
    train, _, _ = _load_data(cfg)
    t = dict(cfg["train"], seed=cfg["seed"])
    t["attack"] = _attack_config(t["attack"], cfg["seed"])
    tcfg = TrainConfig.from_dict(t)
    bank, logs = train_prompts(model, train, tcfg, log_path=run_dir / "train_log.jsonl",
                               num_classes=model.num_classes)
    bank.provenance["run_config_digest"] = digest
    save_bank(bank, run_dir / "bank")
    return {"bank": "bank", "bank_digest": bank.digest(), "final_weight": bank.weight,
            "weight_trajectory": bank.provenance["weight_trajectory"],
            "backbone_digest": parameter_digest(model)}


def cmd_evaluate(cfg, run_dir, digest):
    model = load_checkpoint(_need_path(cfg, "checkpoint"))
    bank = _load_bank(cfg, model)
    _, test, _ = _load_data(cfg)
    e = cfg["evaluate"]
    attacks = [_reseeded(name, cfg["seed"]) for name in e["attacks"]]
    report = evaluate(model, bank, test, attacks, e["strategy"], e["batch_size"], cfg["seed"], digest)
    report.save(run_dir / "report.json")
    outputs = {"report": "report.json", "natural_accuracy": report.natural_accuracy,
               "robust_accuracy": report.robust_accuracy, "bank_digest": report.bank_digest}
    if e["plots"]:
        trajectory = bank.provenance.get("weight_trajectory") if bank is not None else None
        outputs["plots"] = [p.name for p in write_plots(report, run_dir, trajectory)]
    return outputs


def _reseeded(name, seed):
    # registered specs carry seed 0; shift them by the run seed so seeds propagate
    fn = get_attack(name)
    if seed and hasattr(fn, "config"):
        return replace(fn, config=fn.config.with_seed(fn.config.seed + seed))
    return fn


def cmd_diagnose(cfg, run_dir, digest):
    model = load_checkpoint(_need_path(cfg, "checkpoint"))
    _, test, _ = _load_data(cfg)
    d = cfg["diagnose"]
    table = spectrum_swap_diagnostic(model, test, _reseeded(d["attack"], cfg["seed"]),
                                     d["batch_size"])
    table.update(config_digest=digest, seed=cfg["seed"])
    (run_dir / "spectra.json").write_text(json.dumps(table, indent=2), encoding="utf-8")
    print("  ".join(f"{k}={100 * table[k]:.2f}" for k in
                    ("adv_all", "nat_phase", "nat_amplitude", "nat_both", "clean")))
    return {"table": "spectra.json", **{k: v for k, v in table.items() if k != "config_digest"}}


def cmd_attack(cfg, run_dir, digest):
    model = load_checkpoint(_need_path(cfg, "checkpoint"))
    bank = _load_bank(cfg, model)
    train, test, _ = _load_data(cfg)
    a = cfg["attack"]
    data = train if a["split"] == "train" else test
    fn = _reseeded(a["name"], cfg["seed"])
    chunks = []
    for b, (x, y) in enumerate(data.batches(a["batch_size"])):
        chunks.append(seeded_for_batch(fn, b)(model, x, y, bank=bank))
    adv = torch.cat(chunks)
    np.savez(run_dir / "adversarial.npz", images=adv.numpy(), labels=data.labels.numpy(),
             config_digest=np.array(digest), seed=np.array(cfg["seed"]))
    with torch.no_grad():
        acc = float((model(adv).argmax(1) == data.labels).float().mean())
    return {"adversarial": "adversarial.npz", "raw_accuracy_on_adversarial": acc,
            "max_linf": float((adv - data.images).abs().max())}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-prompts": cmd_train_prompts,
    "evaluate": cmd_evaluate,
    "diagnose-spectra": cmd_diagnose,
    "attack": cmd_attack,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="papdefense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "pretrain":
            p.add_argument("mode", nargs="?", choices=["natural", "adversarial"],
                           help="overrides pretrain.mode")
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted override, repeatable")
        p.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<command>-<digest>)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run_dir(args, command, digest) -> Path:
    if args.run_dir:
        return Path(args.run_dir).expanduser().resolve()
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs")).expanduser().resolve()
    return root / f"{command}-{digest[:12]}"


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if getattr(args, "mode", None):
            overrides.append(f"pretrain.mode={args.mode}")
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    digest = config_digest(cfg)
    run_dir = _run_dir(args, args.command, digest)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("papdefense")
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    manifest = {"command": args.command, "config": cfg, "config_digest": digest, "seed": cfg["seed"],
                "version": __version__, "status": "failed"}
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        manifest["outputs"] = COMMANDS[args.command](cfg, run_dir, digest)
        manifest["status"] = "ok"
    except (ConfigError, TrainConfigError, AttackConfigError, EvalConfigError) as e:
        code, manifest["error"] = EXIT_CONFIG, f"config error: {e}"
    except (FileNotFoundError, CheckpointError, PromptBankError, DataError) as e:
        code, manifest["error"] = EXIT_DATA, f"data error: {e}"
    except NumericError as e:
        code, manifest["error"] = EXIT_NUMERIC, f"numeric failure: {e}"
    finally:
        manifest["wall_time"] = time.perf_counter() - t0
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str),
                                               encoding="utf-8")
        root.removeHandler(handler)
        handler.close()
    if code:
        print(manifest["error"], file=sys.stderr)
    else:
        print(run_dir)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
