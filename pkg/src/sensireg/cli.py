"""Command-line workflow driver with reproducible, file-pinned run configs.

Every run validates its JSON config against a per-command schema (unknown
keys are rejected), writes the fully-resolved config next to its outputs,
and exits 0 on success, 1 on runtime failure, 2 on invalid configuration.
Outputs are byte-identical across reruns of the same config and seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .attacks import AttackConfig
from .data import Dataset, default_data_dir, gen_synthetic, load_idx, split
from .evaluate import (BudgetSweep, EvalReport, PAPER_BUDGETS,
                       adversarial_test_accuracy_sweep, emit_report,
                       generate_candidates, read_report, report_filename,
                       targeted_sweep, transferability_eval)
from .nn import Conv2D, Dense, Flatten, Relu, load_model, save_model
from .regularizers import JacobRegConfig, LossWeights, NsConfig
from .train import (TrainConfig, lambda_search, pretrain, robustify,
                    write_training_log)


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


REQUIRED = object()

_DATASET_FIELDS = {
    "dataset_kind": (str, "blobs"),
    "dataset_n": (int, 600),
    "dataset_dim": (int, 2),
    "dataset_classes": (int, 3),
    "dataset_noise": (float, 0.05),
    "data_dir": (str, ""),
    "val_fraction": (float, 0.25),
}

_ATTACK_FIELDS = {
    "attack_kind": (str, "cw"),
    "targeted": (bool, False),
    "confidence": (float, 0.0),
    "steps": (int, 1000),
    "step_size": (float, 0.1),
    "initial_const": (float, 10.0),
    "binary_search_steps": (int, 9),
    "eps_iter": (float, 0.01),
    "n_iter": (int, 1000),
    "rand_init": (bool, True),
    "n_restarts": (int, 400),
    "init_radius": (float, 0.5),
    "ge_sample_count": (int, 10),
    "ge_eps": (float, 0.01),
    "max_iter": (int, 50),
    "init_grad_queries": (int, 100),
    "init_pool": (int, 1000),
}

# Table-driven schemas: field -> (type, default); REQUIRED means must be set.
SCHEMAS: dict[str, dict] = {
    "pretrain": {
        **_DATASET_FIELDS,
        "arch": (str, "mlp"),
        "hidden": ("int_list", [32, 32]),
        "epochs": (int, 30),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-3),
        "model_out": (str, "pretrained.sreg"),
        "seed": (int, 42),
    },
    "robustify": {
        **_DATASET_FIELDS,
        "model_in": ("path", REQUIRED),
        "epochs": (int, 20),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-4),
        "lambda_ns": (float, 2.0),
        "lambda_jacob": (float, 0.01),
        "ns_eps": (float, 1.0),
        "ns_samples": (int, 5),
        "jr_projections": (int, 1),
        "jr_step": (float, 1e-2),
        "model_out": (str, "robust.sreg"),
        "seed": (int, 42),
    },
    "lambda-search": {
        **_DATASET_FIELDS,
        "model_in": ("path", REQUIRED),
        "regularizer": (str, "ns"),
        "batch_size": (int, 32),
        "learning_rate": (float, 1e-4),
        "ns_eps": (float, 1.0),
        "ns_samples": (int, 5),
        "jr_projections": (int, 1),
        "jr_step": (float, 1e-2),
        "seed": (int, 42),
    },
    "attack": {
        **_DATASET_FIELDS,
        **_ATTACK_FIELDS,
        "model_in": ("path", REQUIRED),
        "n_samples": (int, 16),
        "eps": (float, 1.0),
        "seed": (int, 42),
    },
    "evaluate": {
        **_DATASET_FIELDS,
        **_ATTACK_FIELDS,
        "model_in": ("path", REQUIRED),
        "model_id": (str, "model"),
        "budgets": ("float_list", list(PAPER_BUDGETS)),
        "n_samples": (int, 1024),
        "n_base": (int, 113),
        "seed": (int, 42),
    },
    "transfer": {
        **_DATASET_FIELDS,
        **_ATTACK_FIELDS,
        "source_model": ("path", REQUIRED),
        "target_model": ("path", REQUIRED),
        "model_id": (str, "transfer"),
        "budgets": ("float_list", list(PAPER_BUDGETS)),
        "n_samples": (int, 1024),
        "seed": (int, 42),
    },
    "report": {
        "input": ("path", REQUIRED),
        "output": (str, REQUIRED),
        "format": (str, "csv"),
        "seed": (int, 42),
    },
}

COMMANDS = tuple(SCHEMAS)


def _coerce(field: str, kind, raw):
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str) and raw.lower() in ("true", "false"):
                return raw.lower() == "true"
            raise ValueError("expected true/false")
        if kind is int:
            if isinstance(raw, bool):
                raise ValueError("expected integer")
            return int(raw)
        if kind is float:
            return float(raw)
        if kind in (str, "path"):
            if not isinstance(raw, str):
                raise ValueError("expected string")
            return raw
        if kind == "int_list":
            if isinstance(raw, str):
                raw = raw.split(",")
            return [int(v) for v in raw]
        if kind == "float_list":
            if isinstance(raw, str):
                raw = raw.split(",")
            return [float(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {field!r}: {exc}") from exc
    raise ConfigError(f"field {field!r}: unsupported type")


def resolve_config(command: str, file_values: dict, overrides: dict,
                   seed: int | None) -> dict:
    schema = SCHEMAS[command]
    merged = dict(file_values)
    merged.update(overrides)
    if seed is not None:
        merged["seed"] = seed
    unknown = set(merged) - set(schema)
    if unknown:
        raise ConfigError(f"unknown field {sorted(unknown)[0]!r} for "
                          f"command {command!r}")
    resolved = {}
    for field, (kind, default) in schema.items():
        if field in merged:
            resolved[field] = _coerce(field, kind, merged[field])
        elif default is REQUIRED:
            raise ConfigError(f"field {field!r} is required for {command!r}")
        else:
            resolved[field] = default
    for field, (kind, _) in schema.items():
        if kind == "path" and not Path(resolved[field]).exists():
            raise ConfigError(f"field {field!r}: file not found: "
                              f"{resolved[field]}")
    return resolved


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value
    return overrides


def _build_dataset(cfg: dict, seed: int):
    kind = cfg["dataset_kind"]
    if kind == "mnist":
        root = Path(cfg["data_dir"] or default_data_dir())
        train = load_idx(root / "train-images-idx3-ubyte",
                         root / "train-labels-idx1-ubyte")
        test = load_idx(root / "t10k-images-idx3-ubyte",
                        root / "t10k-labels-idx1-ubyte")
        return train, test
    if kind not in ("blobs", "circles"):
        raise ConfigError(f"field 'dataset_kind': unknown kind {kind!r}")
    data = gen_synthetic(kind, n=cfg["dataset_n"], dim=cfg["dataset_dim"],
                         num_classes=cfg["dataset_classes"],
                         noise_std=cfg["dataset_noise"], seed=seed)
    train, val = split(data, [1 - cfg["val_fraction"], cfg["val_fraction"]],
                       seed=seed)
    return train, val


def _build_model(cfg: dict, dataset: Dataset, seed: int):
    rng = np.random.default_rng(seed)
    if cfg["arch"] == "mnist_cnn":
        c, h, w = dataset.input_shape
        flat = 16 * (h - 4) * (w - 4)
        specs = [Conv2D(c, 8, 3, 3, "conv0"), Relu("relu0"),
                 Conv2D(8, 16, 3, 3, "conv1"), Relu("relu1"),
                 Flatten("flat"),
                 Dense(flat, dataset.num_classes, "head")]
        return nn.init_parameters(specs, dataset.input_shape,
                                  dataset.num_classes, rng)
    if cfg["arch"] != "mlp":
        raise ConfigError(f"field 'arch': unknown architecture {cfg['arch']!r}")
    dims = [int(np.prod(dataset.input_shape))] + cfg["hidden"]
    specs = []
    for i in range(len(dims) - 1):
        specs.append(Dense(dims[i], dims[i + 1], f"dense{i}"))
        specs.append(Relu(f"relu{i}"))
    specs.append(Dense(dims[-1], dataset.num_classes, "head"))
    return nn.init_parameters(specs, dataset.input_shape, dataset.num_classes,
                              rng)


def _attack_config(cfg: dict) -> AttackConfig:
    return AttackConfig(kind=cfg["attack_kind"], targeted=cfg["targeted"],
                        seed=cfg["seed"], steps=cfg["steps"],
                        step_size=cfg["step_size"],
                        initial_const=cfg["initial_const"],
                        binary_search_steps=cfg["binary_search_steps"],
                        confidence=cfg["confidence"],
                        eps_iter=cfg["eps_iter"], n_iter=cfg["n_iter"],
                        rand_init=cfg["rand_init"],
                        n_restarts=cfg["n_restarts"],
                        init_radius=cfg["init_radius"],
                        ge_sample_count=cfg["ge_sample_count"],
                        ge_eps=cfg["ge_eps"], max_iter=cfg["max_iter"],
                        init_grad_queries=cfg["init_grad_queries"],
                        init_pool=cfg["init_pool"])


def _write_resolved(cfg: dict, command: str, out_dir: Path, workers: int):
    payload = {"command": command, "workers": workers, **cfg}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    (out_dir / "resolved_config.json").write_text(text)


def _train_cfg(cfg: dict, weights=None, ns_cfg=None, jr_cfg=None) -> TrainConfig:
    return TrainConfig(learning_rate=cfg["learning_rate"],
                       epochs=cfg.get("epochs", 1),
                       batch_size=cfg["batch_size"],
                       weights=weights or LossWeights(),
                       ns_cfg=ns_cfg, jr_cfg=jr_cfg, seed=cfg["seed"])


def cmd_pretrain(cfg: dict, out_dir: Path, workers: int) -> int:
    train, val = _build_dataset(cfg, cfg["seed"])
    model = _build_model(cfg, train, cfg["seed"])
    run = pretrain(model, train, _train_cfg(cfg), val)
    save_model(run.model, out_dir / cfg["model_out"])
    write_training_log(run.history, out_dir / "pretrain_log.csv")
    print(f"pretrained: train_acc={run.final_train_acc:.4f} "
          f"val_acc={run.final_val_acc:.4f} -> {out_dir / cfg['model_out']}")
    return 0


def cmd_robustify(cfg: dict, out_dir: Path, workers: int) -> int:
    train, val = _build_dataset(cfg, cfg["seed"])
    model = load_model(cfg["model_in"])
    weights = LossWeights(lambda_ns=cfg["lambda_ns"],
                          lambda_jacob=cfg["lambda_jacob"])
    ns_cfg = NsConfig(ns_eps=cfg["ns_eps"], n_samples=cfg["ns_samples"])
    jr_cfg = JacobRegConfig(n_projections=cfg["jr_projections"],
                            fd_step=cfg["jr_step"])
    run = robustify(model, train, _train_cfg(cfg, weights, ns_cfg, jr_cfg), val)
    save_model(run.model, out_dir / cfg["model_out"])
    write_training_log(run.history, out_dir / "robustify_log.csv")
    print(f"robustified: train_acc={run.final_train_acc:.4f} "
          f"val_acc={run.final_val_acc:.4f} -> {out_dir / cfg['model_out']}")
    return 0


def cmd_lambda_search(cfg: dict, out_dir: Path, workers: int) -> int:
    train, val = _build_dataset(cfg, cfg["seed"])
    model = load_model(cfg["model_in"])
    ns_cfg = NsConfig(ns_eps=cfg["ns_eps"], n_samples=cfg["ns_samples"])
    jr_cfg = JacobRegConfig(n_projections=cfg["jr_projections"],
                            fd_step=cfg["jr_step"])
    result = lambda_search(model, train, cfg["regularizer"],
                           _train_cfg(cfg, ns_cfg=ns_cfg, jr_cfg=jr_cfg), val)
    payload = {"regularizer": cfg["regularizer"],
               "recommended": result.recommended, "r0": result.r0,
               "lambda0": result.lambda0,
               "probes": [{"lambda": lam, "too_high": high}
                          for lam, high in result.probes]}
    (out_dir / "lambda_search.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(f"recommended lambda for {cfg['regularizer']}: {result.recommended:.6g}")
    return 0


def cmd_attack(cfg: dict, out_dir: Path, workers: int) -> int:
    _, test = _build_dataset(cfg, cfg["seed"])
    model = load_model(cfg["model_in"])
    attack_cfg = _attack_config(cfg)
    indices = np.random.default_rng(cfg["seed"]).permutation(
        len(test))[:cfg["n_samples"]]
    if attack_cfg.targeted:
        instances = []
        for i in indices:
            label = int(test.labels[int(i)])
            target = (label + 1) % test.num_classes
            instances.append((int(i), target))
    else:
        instances = [(int(i), None) for i in indices]
    sweep = BudgetSweep(budgets=(cfg["eps"],))
    records = generate_candidates(model, attack_cfg, test, instances, sweep,
                                  workers)
    lines = ["index,label,target,success,distance,queries"]
    for rec in records:
        if rec.per_eps is not None:
            cand, success, dist, queries = rec.per_eps[cfg["eps"]]
        else:
            success, dist, queries = rec.success, rec.distance, rec.queries
        target = "" if rec.target is None else rec.target
        lines.append(f"{rec.index},{rec.label},{target},"
                     f"{'true' if success else 'false'},{dist!r},{queries}")
    (out_dir / "attack_outcomes.csv").write_text("\n".join(lines) + "\n")
    n_success = sum(1 for line in lines[1:] if ",true," in line)
    print(f"attacked {len(records)} instances, {n_success} successes")
    return 0


def cmd_evaluate(cfg: dict, out_dir: Path, workers: int) -> int:
    _, test = _build_dataset(cfg, cfg["seed"])
    model = load_model(cfg["model_in"])
    attack_cfg = _attack_config(cfg)
    sweep = BudgetSweep(budgets=tuple(cfg["budgets"]))
    if attack_cfg.targeted:
        rows = targeted_sweep(model, attack_cfg, test, sweep,
                              n_base=cfg["n_base"], workers=workers)
    else:
        rows = adversarial_test_accuracy_sweep(model, attack_cfg, test, sweep,
                                               n_samples=cfg["n_samples"],
                                               workers=workers)
    report = EvalReport(rows=rows, metadata={
        "model": cfg["model_id"], "seed": cfg["seed"],
        "dataset": cfg["dataset_kind"]})
    name = report_filename(cfg["model_id"], attack_cfg.kind,
                           attack_cfg.targeted)
    emit_report(report, out_dir / name, format="csv")
    emit_report(report, out_dir / (name[:-4] + ".json"), format="json")
    print(f"evaluated {attack_cfg.kind}: {len(rows)} rows -> {out_dir / name}")
    return 0


def cmd_transfer(cfg: dict, out_dir: Path, workers: int) -> int:
    _, test = _build_dataset(cfg, cfg["seed"])
    source = load_model(cfg["source_model"])
    target = load_model(cfg["target_model"])
    attack_cfg = _attack_config(cfg)
    sweep = BudgetSweep(budgets=tuple(cfg["budgets"]))
    rows = transferability_eval(source, target, attack_cfg, test, sweep,
                                n_samples=cfg["n_samples"], workers=workers)
    report = EvalReport(rows=rows, metadata={
        "model": cfg["model_id"], "seed": cfg["seed"],
        "dataset": cfg["dataset_kind"], "source": cfg["source_model"],
        "target": cfg["target_model"]})
    name = report_filename(cfg["model_id"], attack_cfg.kind,
                           attack_cfg.targeted)
    emit_report(report, out_dir / name, format="csv")
    emit_report(report, out_dir / (name[:-4] + ".json"), format="json")
    print(f"transfer eval: {len(rows)} rows -> {out_dir / name}")
    return 0


def cmd_report(cfg: dict, out_dir: Path, workers: int) -> int:
    report = read_report(cfg["input"])
    out_path = Path(cfg["output"])
    if not out_path.is_absolute():
        out_path = out_dir / out_path
    emit_report(report, out_path, format=cfg["format"])
    print(f"converted {cfg['input']} -> {out_path}")
    return 0


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "robustify": cmd_robustify,
    "lambda-search": cmd_lambda_search,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "transfer": cmd_transfer,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sensireg",
        description="Train sensitivity-regularized classifiers and evaluate "
                    "them against L2 evasion attacks.",
        epilog="Trailing key=value pairs override config fields.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed (default 42)")
    parser.add_argument("--out-dir", default="out")
    parser.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="eval-harness parallelism")
    args, extras = parser.parse_known_args(argv)

    try:
        file_values = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    file_values = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"field 'config': cannot read {args.config}: "
                                  f"{exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"field 'config': invalid JSON: {exc}") from exc
            if not isinstance(file_values, dict):
                raise ConfigError("field 'config': top level must be an object")
        overrides = _parse_overrides(extras)
        cfg = resolve_config(args.command, file_values, overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, args.command, out_dir, args.workers)
        return _HANDLERS[args.command](cfg, out_dir, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
