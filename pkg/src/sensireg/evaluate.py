"""Adversarial-test-accuracy sweeps, targeted and transferability protocols.

Accuracy here is the model's accuracy on attack outputs: successful
adversarial candidates mixed with the unmodified samples where the attack
failed. Minimum-distance attacks (the Carlini-Wagner family, HopSkipJump)
run once per instance and the accuracy-vs-budget curve comes from
thresholding their achieved distances; PGD is budget-parameterized and runs
once per budget. Candidates are always generated against a source model and
scored against a scoring model, so a transferability evaluation is the same
code path as a direct one with a different scorer — source == target
reproduces the direct sweep row for row.
"""

from __future__ import annotations

import csv
import io
import json
import multiprocessing as mp
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .attacks import AttackConfig, run_attack
from .data import Dataset
from .nn import Model

PAPER_BUDGETS = (0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0)

DISTANCE_TOL = 1e-5

MIN_DISTANCE_KINDS = ("cw", "cw_restarts", "cw_grad_expect", "hop_skip_jump")

REPORT_COLUMNS = ("attack", "targeted", "epsilon", "accuracy", "n",
                  "mean_dist", "queries")


@dataclass(frozen=True)
class BudgetSweep:
    budgets: tuple[float, ...] = PAPER_BUDGETS

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))
        if not self.budgets:
            raise ValueError("budget list must not be empty")
        if any(b <= 0 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if any(b1 >= b2 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be strictly ascending")


@dataclass(frozen=True)
class EvalRow:
    attack: str
    targeted: bool
    epsilon: float
    accuracy: float
    n: int
    mean_dist: float
    queries: int

    def __post_init__(self):
        # pinned to 4 decimals so CSV serialization is lossless
        object.__setattr__(self, "accuracy", round(float(self.accuracy), 4))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "mean_dist", float(self.mean_dist))


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


@dataclass
class InstanceRecord:
    """Attack result for one (sample, target) instance against the source model."""
    index: int
    label: int
    target: int | None
    candidate: np.ndarray | None      # minimum-distance attacks
    success: bool
    distance: float
    queries: int
    per_eps: dict[float, tuple[np.ndarray, bool, float, int]] | None  # pgd


def _instance_seed(base_seed: int, index: int, target: int | None) -> int:
    entropy = [base_seed, index, 0 if target is None else target + 1]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _select_indices(dataset: Dataset, n: int, seed: int) -> np.ndarray:
    if n > len(dataset):
        raise ValueError(f"n_samples={n} exceeds dataset size {len(dataset)}")
    return np.random.default_rng(seed).permutation(len(dataset))[:n]


def find_target_exemplar(model: Model, dataset: Dataset,
                         target: int) -> np.ndarray | None:
    """First dataset sample the model classifies as ``target`` (prefers true
    members of the class); used to seed targeted boundary attacks."""
    preds = nn.predict_labels(model, dataset.inputs)
    members = np.flatnonzero((dataset.labels == target) & (preds == target))
    if len(members):
        return dataset.inputs[members[0]]
    anyone = np.flatnonzero(preds == target)
    if len(anyone):
        return dataset.inputs[anyone[0]]
    return None


# ---------------------------------------------------------------------------
# candidate generation (always against the source model)

_CTX: dict = {}


def _init_worker(model, cfg, budgets):
    _CTX["model"] = model
    _CTX["cfg"] = cfg
    _CTX["budgets"] = budgets


def _attack_instance(task) -> InstanceRecord:
    model: Model = _CTX["model"]
    cfg: AttackConfig = _CTX["cfg"]
    budgets = _CTX["budgets"]
    index, x, label, target, exemplar, misclassified = task
    seed = _instance_seed(cfg.seed, int(index), target)

    if misclassified:
        # counts as a success at distance zero at every budget
        return InstanceRecord(index=index, label=label, target=target,
                              candidate=x.copy(), success=True, distance=0.0,
                              queries=1, per_eps=None)

    if cfg.kind == "pgd":
        per_eps = {}
        for eps in budgets:
            out = run_attack(model, x, label, cfg, eps=eps,
                             target_class=target, seed=seed)
            per_eps[eps] = (out.adversarial.astype(np.float32), out.success,
                            out.l2_distance, out.queries)
        return InstanceRecord(index=index, label=label, target=target,
                              candidate=None, success=False, distance=0.0,
                              queries=sum(v[3] for v in per_eps.values()),
                              per_eps=per_eps)

    out = run_attack(model, x, label, cfg, target_class=target,
                     init_adversarial=exemplar, seed=seed)
    return InstanceRecord(index=index, label=label, target=target,
                          candidate=out.adversarial.astype(np.float32),
                          success=out.success, distance=out.l2_distance,
                          queries=out.queries, per_eps=None)


def generate_candidates(source_model: Model, attack_cfg: AttackConfig,
                        dataset: Dataset, instances, sweep: BudgetSweep,
                        workers: int = 1) -> list[InstanceRecord]:
    """Attack every (index, target) instance against the source model.

    ``instances`` is a list of (dataset index, target-or-None). Results are
    deterministic in the per-instance seeds and independent of ``workers``.
    """
    preds = nn.predict_labels(source_model, dataset.inputs)
    tasks = []
    for index, target in instances:
        x = dataset.inputs[index]
        label = int(dataset.labels[index])
        misclassified = bool(preds[index] != label)
        exemplar = None
        if (attack_cfg.kind == "hop_skip_jump" and attack_cfg.targeted
                and target is not None and not misclassified):
            exemplar = find_target_exemplar(source_model, dataset, target)
        tasks.append((int(index), x, label, target, exemplar, misclassified))

    if workers <= 1:
        _init_worker(source_model, attack_cfg, sweep.budgets)
        return [_attack_instance(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers, initializer=_init_worker,
                  initargs=(source_model, attack_cfg, sweep.budgets)) as pool:
        return pool.map(_attack_instance, tasks)


# ---------------------------------------------------------------------------
# scoring (against any model sharing the input interface)


def score_candidates(records: list[InstanceRecord], scoring_model: Model,
                     dataset: Dataset, attack_cfg: AttackConfig,
                     sweep: BudgetSweep) -> list[EvalRow]:
    """Accuracy of ``scoring_model`` on attack outputs at every budget.

    At budget eps the attack output is the candidate when the source-side
    attack succeeded within eps, otherwise the unmodified sample.
    """
    rows = []
    labels = np.array([r.label for r in records])
    originals = np.stack([dataset.inputs[r.index] for r in records])
    for eps in sweep.budgets:
        outputs = np.empty_like(originals)
        used = np.zeros(len(records), dtype=bool)
        dists = np.zeros(len(records))
        queries = 0
        for i, rec in enumerate(records):
            if rec.per_eps is not None:
                cand, success, dist, q = rec.per_eps[eps]
                queries += q
            else:
                cand, success, dist = rec.candidate, rec.success, rec.distance
                queries += rec.queries
            if success and dist <= eps + DISTANCE_TOL:
                outputs[i] = cand
                used[i] = True
                dists[i] = dist
            else:
                outputs[i] = originals[i]
        preds = nn.predict_labels(scoring_model, outputs)
        accuracy = float((preds == labels).mean())
        mean_dist = float(dists[used].mean()) if used.any() else 0.0
        rows.append(EvalRow(attack=attack_cfg.kind, targeted=attack_cfg.targeted,
                            epsilon=eps, accuracy=accuracy, n=len(records),
                            mean_dist=mean_dist, queries=queries))
    rows.sort(key=lambda r: (r.attack, r.targeted, r.epsilon))
    return rows


# ---------------------------------------------------------------------------
# protocols


def adversarial_test_accuracy_sweep(model: Model, attack_cfg: AttackConfig,
                                    dataset: Dataset, sweep: BudgetSweep,
                                    n_samples: int = 1024,
                                    workers: int = 1) -> list[EvalRow]:
    """Untargeted protocol: seeded sample of the set, one row per budget."""
    if attack_cfg.targeted:
        raise ValueError("use targeted_sweep for targeted configurations")
    indices = _select_indices(dataset, n_samples, attack_cfg.seed)
    instances = [(int(i), None) for i in indices]
    records = generate_candidates(model, attack_cfg, dataset, instances,
                                  sweep, workers)
    return score_candidates(records, model, dataset, attack_cfg, sweep)


def targeted_instances(dataset: Dataset, n_base: int, seed: int):
    """The (sample, target) grid: n_base seeded samples x every wrong class."""
    if dataset.num_classes < 2:
        raise ValueError("targeted protocol needs at least two classes")
    indices = _select_indices(dataset, n_base, seed)
    instances = []
    for i in indices:
        label = int(dataset.labels[int(i)])
        for target in range(dataset.num_classes):
            if target != label:
                instances.append((int(i), target))
    return instances


def targeted_sweep(model: Model, attack_cfg: AttackConfig, dataset: Dataset,
                   sweep: BudgetSweep, n_base: int = 113,
                   workers: int = 1) -> list[EvalRow]:
    """Targeted protocol: n_base samples x (C-1) targets (1,017 for C=10)."""
    if not attack_cfg.targeted:
        raise ValueError("targeted_sweep needs a targeted attack config")
    instances = targeted_instances(dataset, n_base, attack_cfg.seed)
    records = generate_candidates(model, attack_cfg, dataset, instances,
                                  sweep, workers)
    return score_candidates(records, model, dataset, attack_cfg, sweep)


def transferability_eval(source_model: Model, target_model: Model,
                         attack_cfg: AttackConfig, dataset: Dataset,
                         sweep: BudgetSweep, n_samples: int = 1024,
                         workers: int = 1) -> list[EvalRow]:
    """Candidates crafted on the source model, scored on the target model."""
    if source_model.input_shape != target_model.input_shape:
        raise ValueError("models have different input shapes")
    if source_model.num_classes != target_model.num_classes:
        raise ValueError("models have different class counts")
    if attack_cfg.targeted:
        instances = targeted_instances(dataset, n_samples, attack_cfg.seed)
    else:
        indices = _select_indices(dataset, n_samples, attack_cfg.seed)
        instances = [(int(i), None) for i in indices]
    records = generate_candidates(source_model, attack_cfg, dataset, instances,
                                  sweep, workers)
    return score_candidates(records, target_model, dataset, attack_cfg, sweep)


# ---------------------------------------------------------------------------
# report I/O


def report_filename(model_id: str, attack: str, targeted: bool) -> str:
    mode = "targeted" if targeted else "untargeted"
    return f"{model_id}_{attack}_{mode}.csv"


def _row_to_csv(row: EvalRow) -> list[str]:
    return [row.attack, "true" if row.targeted else "false", repr(row.epsilon),
            f"{row.accuracy:.4f}", str(row.n), repr(row.mean_dist),
            str(row.queries)]


def emit_report(report: EvalReport, path, format: str = "csv"):
    """Write the report; CSV carries the rows, JSON adds the metadata."""
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow(_row_to_csv(row))
        payload = buf.getvalue()
    elif format == "json":
        payload = json.dumps({"metadata": report.metadata,
                              "rows": [asdict(r) for r in report.rows]},
                             sort_keys=True, indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        with open(path, "w") as fh:
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def read_report(path, format: str | None = None) -> EvalReport:
    if format is None:
        format = "json" if str(path).endswith(".json") else "csv"
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read report from {path}: {exc}") from exc
    if format == "json":
        blob = json.loads(text)
        rows = [EvalRow(**r) for r in blob["rows"]]
        return EvalReport(rows=rows, metadata=blob.get("metadata", {}))
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected CSV header {header}")
    rows = []
    for rec in reader:
        rows.append(EvalRow(attack=rec[0], targeted=rec[1] == "true",
                            epsilon=float(rec[2]), accuracy=float(rec[3]),
                            n=int(rec[4]), mean_dist=float(rec[5]),
                            queries=int(rec[6])))
    return EvalReport(rows=rows, metadata={})
