"""Experiment harness: single fits, regularization sweeps and method comparisons.

Every run is identified by ``(method, lambda, seed)``. The seed drives the
synthetic data, the factor initialization and the audit probe, so a run is
reproducible from its row in a metrics CSV plus the preset that produced it.

Presets are JSON files (see ``faircpd/presets``) with this layout::

    {
      "name": "fig2b",
      "command": "compare",              # or "sweep"
      "description": "...",
      "dataset": {"name": "synthetic"},  # synthetic | contraceptive | counterexample | <dir>
      "repeats": 5,
      "seed": 0,
      "train": {...},                    # TrainConfig fields shared by every method
      "audit": {...},                    # AuditConfig fields
      "methods": {
        "KHSIC": {"lambda": 0.04,        # or "grid": {"lo": 0, "hi": 0.04, "count": 100}
                  "train": {...}, "regularizer": {...}}
      },
      "small": {...}                     # merged over the above for desk-scale runs
    }
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, astuple, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import audit, bcd, datasets, kernels, tensor
from .errors import DivergenceError, UndefinedAlignmentError

METRICS_HEADER = ("method,lambda,seed,relative_residual,unfairness,normalized_khsic,"
                  "khsic,hsic,orthogonality_norm,wall_time_seconds")
METRIC_FIELDS = ("relative_residual", "unfairness", "normalized_khsic", "khsic", "hsic",
                 "orthogonality_norm", "wall_time_seconds")
PRESETS = ("fig1a", "fig1b", "fig2a", "fig2b", "fig3a", "fig3b")
OUT_ENV = "FAIRCPD_OUT"
# RBF alignment the counterexample must exceed; the linear-kernel alignment there is exactly 0
DEPENDENCE_THRESHOLD = 0.25


@dataclass(frozen=True)
class MetricsRecord:
    """Metrics of one fitted model. A diverged run has NaN in every metric field."""

    method: str
    lam: float
    seed: int
    relative_residual: float
    unfairness: float
    normalized_khsic: float
    khsic: float
    hsic: float
    orthogonality_norm: float
    wall_time_seconds: float

    def __post_init__(self):
        if self.method.upper() not in bcd.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        u = self.unfairness
        if math.isfinite(u) and not -0.5 <= u <= 0.5:
            raise ValueError(f"unfairness {u} outside [-0.5, 0.5]")

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.relative_residual)

    def to_row(self) -> List[str]:
        vals = [self.method, repr(float(self.lam)), str(self.seed)]
        vals += [repr(float(getattr(self, f))) for f in METRIC_FIELDS]
        return vals

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "MetricsRecord":
        if len(row) != 10:
            raise ValueError(f"expected 10 fields, got {len(row)}")
        return cls(row[0], float(row[1]), int(row[2]), *(float(v) for v in row[3:]))

    def sort_key(self):
        return (self.method, self.lam, self.seed)

    @classmethod
    def diverged_run(cls, method, lam, seed, wall_time=math.nan) -> "MetricsRecord":
        nan = math.nan
        return cls(method, lam, seed, nan, nan, nan, nan, nan, nan, wall_time)


def format_metrics(records: Sequence[MetricsRecord], comments: Sequence[str] = ()) -> str:
    """CSV text: ``# comment`` lines, the header, then one row per record."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    buf.write(METRICS_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow(r.to_row())
    return buf.getvalue()


def parse_metrics(text: str) -> Tuple[List[MetricsRecord], List[str]]:
    """Inverse of :func:`format_metrics`; returns ``(records, comments)``."""
    comments, body = [], []
    for line in text.splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            body.append(line)
    if not body or body[0] != METRICS_HEADER:
        raise ValueError("missing or wrong metrics header")
    return [MetricsRecord.from_row(row) for row in csv.reader(body[1:])], comments


def strip_wall_time(text: str) -> str:
    """Drop the wall-time column, the only nondeterministic field of a metrics CSV."""
    out = []
    for line in text.splitlines():
        out.append(line if line.startswith("#") else line.rsplit(",", 1)[0])
    return "\n".join(out) + "\n"


# -- datasets -----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Which data to fit. ``name`` is a built-in dataset or a directory written by
    :meth:`LabeledDataset.save`."""

    name: str = "synthetic"
    small: bool = False
    path: Optional[str] = None
    drop_sensitive: bool = False

    def load(self, seed: int = 0) -> datasets.LabeledDataset:
        if self.name == "synthetic":
            spec = datasets.SyntheticSpec.small(seed) if self.small else datasets.SyntheticSpec(seed=seed)
            return datasets.gen_synthetic(spec)
        if self.name == "contraceptive":
            return datasets.load_contraceptive(self.path, drop_sensitive_from_x=self.drop_sensitive)
        if self.name == "counterexample":
            return datasets.counterexample_dataset()
        if Path(self.name).is_dir():
            return datasets.LabeledDataset.load(self.name)
        raise ValueError(f"unknown dataset {self.name!r}")

    @property
    def fit_rank(self) -> Optional[int]:
        """Fit rank the experiments use for this dataset, if it has one."""
        if self.name == "synthetic":
            return (datasets.SyntheticSpec.small() if self.small else datasets.SyntheticSpec()).fit_rank
        if self.name == "contraceptive":
            return 6
        if self.name == "counterexample":
            return 2
        return None


# -- single runs ----------------------------------------------------------------

def method_config(train: bcd.TrainConfig, method: str, lam: float, seed: int) -> bcd.TrainConfig:
    """``train`` with the regularizer switched to ``method`` at strength ``lam``."""
    kind = bcd.METHODS[method.upper()]
    reg = replace(train.regularizer, kind=kind)
    if kind == "fatr":
        reg = replace(reg, lambda_o=lam, lam=0.0)
    elif kind == "none":
        reg = replace(reg, lam=0.0, lambda_o=0.0, lambda_l2=0.0)
    else:
        reg = replace(reg, lam=lam, lambda_o=0.0, lambda_l2=0.0)
    return replace(train, regularizer=reg, seed=seed)


def measure(data: datasets.LabeledDataset, model: tensor.FactorModel, method: str, lam: float,
            seed: int, audit_cfg: audit.AuditConfig, wall_time: float):
    """Audit a fitted model; returns ``(MetricsRecord, AuditResult)``."""
    a, s = model.a, data.s
    res = audit.unfairness(a, data.labels, replace(audit_cfg, seed=seed))
    try:
        nk = kernels.normalized_khsic(a, s)
    except UndefinedAlignmentError:
        nk = math.nan
    rec = MetricsRecord(
        method, float(lam), seed,
        tensor.relative_residual(data.x, model), res.unfairness, nk,
        kernels.khsic(a, s), kernels.hsic_linear(a, s), kernels.orthogonality_norm(a, s),
        wall_time,
    )
    return rec, res


@dataclass
class RunResult:
    record: MetricsRecord
    audit: Optional[audit.AuditResult] = None
    model: Optional[tensor.FactorModel] = None
    trace: Optional[bcd.TraceLog] = None
    error: Optional[str] = None
    epoch: Optional[int] = None


def run_point(dataset: DatasetSpec, method: str, lam: float, train: bcd.TrainConfig,
              audit_cfg: audit.AuditConfig, seed: int, data=None) -> RunResult:
    """Fit one ``(method, lambda, seed)`` point and audit it. Divergence is caught
    and reported in the result rather than raised."""
    data = dataset.load(seed) if data is None else data
    cfg = method_config(train, method, lam, seed)
    start = time.perf_counter()
    try:
        model, trace = bcd.fit(data.x, data.s, cfg)
    except DivergenceError as exc:
        rec = MetricsRecord.diverged_run(method, float(lam), seed, time.perf_counter() - start)
        return RunResult(rec, error=str(exc), epoch=exc.epoch)
    rec, res = measure(data, model, method, lam, seed, audit_cfg, time.perf_counter() - start)
    return RunResult(rec, res, model, trace)


# -- sweeps and comparisons -----------------------------------------------------

def linear_grid(lo: float, hi: float, count: int) -> Tuple[float, ...]:
    if count < 1:
        raise ValueError("grid count must be >= 1")
    if lo > hi:
        raise ValueError("grid needs lo <= hi")
    return tuple(float(v) for v in np.linspace(lo, hi, count))


@dataclass(frozen=True)
class Arm:
    """One method with its lambda grid and training configuration."""

    method: str
    lambdas: Tuple[float, ...]
    train: bcd.TrainConfig

    def __post_init__(self):
        if self.method.upper() not in bcd.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.lambdas:
            raise ValueError("lambda grid must be nonempty")
        if any(v < 0 for v in self.lambdas):
            raise ValueError("lambdas must be nonnegative")


@dataclass(frozen=True)
class SweepSpec:
    arms: Tuple[Arm, ...]
    dataset: DatasetSpec = DatasetSpec()
    audit: audit.AuditConfig = audit.AuditConfig()
    repeats: int = 1
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.arms:
            raise ValueError("a sweep needs at least one method")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @property
    def seeds(self) -> range:
        return range(self.seed, self.seed + self.repeats)

    def points(self) -> List[Tuple[str, float, bcd.TrainConfig, int]]:
        return [(arm.method, lam, arm.train, seed)
                for arm in self.arms for lam in arm.lambdas for seed in self.seeds]

    def provenance(self) -> List[str]:
        lines = [f"preset: {self.name or '-'}",
                 f"dataset: {json.dumps(asdict(self.dataset), sort_keys=True)}",
                 f"repeats: {self.repeats}", f"seed: {self.seed}",
                 f"audit: {json.dumps(asdict(self.audit), sort_keys=True)}"]
        for arm in self.arms:
            lines.append(f"arm {arm.method}: {len(arm.lambdas)} lambdas in "
                         f"[{min(arm.lambdas)!r}, {max(arm.lambdas)!r}]; train "
                         f"{json.dumps(bcd.config_to_dict(arm.train), sort_keys=True)}")
        return lines


def _run_task(task):
    dataset, method, lam, train, audit_cfg, seed = task
    res = run_point(dataset, method, lam, train, audit_cfg, seed)
    # drop the model and trace so results stay small across processes
    return RunResult(res.record, res.audit, error=res.error, epoch=res.epoch)


def run_sweep(spec: SweepSpec, jobs: int = 1) -> List[RunResult]:
    """Run every grid point for every seed, sorted stably by (method, lambda, seed).

    With ``jobs > 1`` points run in worker processes; each worker builds its
    own dataset, so the results do not depend on scheduling.
    """
    tasks = [(spec.dataset, m, lam, train, spec.audit, seed) for m, lam, train, seed in spec.points()]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        cache: Dict[int, datasets.LabeledDataset] = {}
        results = []
        for dataset, m, lam, train, audit_cfg, seed in tasks:
            if seed not in cache:
                cache = {seed: dataset.load(seed)}
            res = run_point(dataset, m, lam, train, audit_cfg, seed, data=cache[seed])
            results.append(RunResult(res.record, res.audit, error=res.error, epoch=res.epoch))
    return sorted(results, key=lambda r: r.record.sort_key())


def sweep_comments(spec: SweepSpec, results: Sequence[RunResult]) -> List[str]:
    comments = spec.provenance()
    for r in results:
        if r.error is not None:
            rec = r.record
            comments.append(f"diverged: method={rec.method} lambda={rec.lam!r} seed={rec.seed} "
                            f"epoch={r.epoch}")
    return comments


@dataclass(frozen=True)
class MethodSummary:
    method: str
    lam: float
    runs: int
    diverged: int
    residual_mean: float
    residual_std: float
    unfairness_mean: float
    unfairness_std: float
    majority_floor_mean: float
    normalized_khsic_mean: float
    orthogonality_mean: float


SUMMARY_FIELDS = tuple(f.name for f in fields(MethodSummary))


def summarize(results: Sequence[RunResult]) -> List[MethodSummary]:
    """Mean and standard deviation per ``(method, lambda)`` over the finished runs."""
    groups: Dict[Tuple[str, float], List[RunResult]] = {}
    for r in results:
        groups.setdefault((r.record.method, r.record.lam), []).append(r)
    out = []
    for (method, lam), rs in groups.items():
        ok = [r for r in rs if r.error is None]

        def col(get):
            return np.array([get(r) for r in ok], dtype=np.float64)

        def mean(v):
            return float(np.mean(v)) if v.size else math.nan

        def std(v):
            return float(np.std(v)) if v.size else math.nan

        res = col(lambda r: r.record.relative_residual)
        unf = col(lambda r: r.record.unfairness)
        out.append(MethodSummary(
            method, lam, len(rs), len(rs) - len(ok), mean(res), std(res), mean(unf), std(unf),
            mean(col(lambda r: r.audit.majority_floor)),
            mean(col(lambda r: r.record.normalized_khsic)),
            mean(col(lambda r: r.record.orthogonality_norm)),
        ))
    return out


def format_summary(rows: Sequence[MethodSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for row in rows:
        w.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in astuple(row)])
    return buf.getvalue()


def summary_table(rows: Sequence[MethodSummary]) -> str:
    """Human-readable ``mean +- std`` table."""
    lines = [f"{'method':8s} {'lambda':>10s} {'residual':>20s} {'unfairness':>20s} {'floor':>7s}"]
    for r in rows:
        lines.append(f"{r.method:8s} {r.lam:10.4g} {r.residual_mean:10.4f} +- {r.residual_std:6.4f} "
                     f"{r.unfairness_mean:10.4f} +- {r.unfairness_std:6.4f} {r.majority_floor_mean:7.3f}")
    return "\n".join(lines)


# -- presets ----------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset_path(name: str) -> Path:
    p = Path(name)
    if p.suffix == ".json" and p.exists():
        return p
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)} or a .json path")
    return Path(str(resources.files("faircpd") / "presets" / f"{name}.json"))


def load_preset_dict(name: str, small: bool = False) -> dict:
    raw = json.loads(preset_path(name).read_text())
    small_over = raw.pop("small", {})
    if small:
        raw = _merge(raw, small_over)
        raw.setdefault("dataset", {})["small"] = True
    return raw


def spec_from_dict(d: dict) -> SweepSpec:
    """Build a :class:`SweepSpec` from a preset dictionary (already merged)."""
    dataset = DatasetSpec(**d.get("dataset", {}))
    audit_cfg = audit.AuditConfig(**d.get("audit", {}))
    common = d.get("train", {})
    arms = []
    for method, entry in d["methods"].items():
        train = dict(_merge(common, entry.get("train", {})))
        if "rank" not in train and dataset.fit_rank is not None:
            train["rank"] = dataset.fit_rank
        train["regularizer"] = entry.get("regularizer", {})
        cfg = bcd.config_from_dict(train)
        if "grid" in entry:
            g = entry["grid"]
            lambdas = tuple(float(v) for v in g) if isinstance(g, list) else linear_grid(g["lo"], g["hi"], g["count"])
        else:
            lambdas = (float(entry.get("lambda", 0.0)),)
        arms.append(Arm(method.upper(), lambdas, cfg))
    return SweepSpec(tuple(arms), dataset, audit_cfg, int(d.get("repeats", 1)), int(d.get("seed", 0)),
                     d.get("name", ""))


def load_preset(name: str, small: bool = False) -> Tuple[str, SweepSpec]:
    """Return ``(command, spec)`` for a named preset or a preset JSON file."""
    d = load_preset_dict(name, small)
    return d.get("command", "sweep"), spec_from_dict(d)


# -- commands ------------------------------------------------------------------------

def cmd_fit(dataset: DatasetSpec, method: str, lam: float, train: bcd.TrainConfig,
            audit_cfg: audit.AuditConfig, out: Path, seed: int = 0) -> RunResult:
    """Fit, audit and write ``metrics.csv``, ``trace.csv``, ``config.json`` and the
    factors (``model/``) to ``out``. Raises :class:`DivergenceError` on divergence."""
    data = dataset.load(seed)
    cfg = method_config(train, method, lam, seed)
    start = time.perf_counter()
    model, trace = bcd.fit(data.x, data.s, cfg)
    rec, res = measure(data, model, method, lam, seed, audit_cfg, time.perf_counter() - start)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(format_metrics([rec]))
    trace.to_csv(out / "trace.csv")
    tensor.save_model(out / "model", model)
    config = {"dataset": asdict(dataset), "method": method, "lambda": lam,
              "train": bcd.config_to_dict(cfg), "audit": asdict(audit_cfg)}
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return RunResult(rec, res, model, trace)


def cmd_sweep(spec: SweepSpec, out: Path, jobs: int = 1, gnuplot: bool = False) -> List[RunResult]:
    """Run the sweep and write ``sweep.csv`` (and ``sweep.gp`` with ``gnuplot``)."""
    results = run_sweep(spec, jobs)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(format_metrics([r.record for r in results], sweep_comments(spec, results)))
    if gnuplot:
        (out / "sweep.gp").write_text(gnuplot_script("sweep.csv", [a.method for a in spec.arms]))
    return results


def cmd_compare(spec: SweepSpec, out: Path, jobs: int = 1) -> List[MethodSummary]:
    """Run every method over the seeded repeats; write ``compare.csv`` and ``summary.csv``."""
    results = run_sweep(spec, jobs)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(format_metrics([r.record for r in results], sweep_comments(spec, results)))
    rows = summarize(results)
    (out / "summary.csv").write_text(format_summary(rows))
    return rows


@dataclass(frozen=True)
class CounterexampleReport:
    a: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    orthogonality_norm: float
    normalized_khsic: float
    probe_accuracy: float

    @property
    def passed(self) -> bool:
        return (self.orthogonality_norm == 0.0 and self.probe_accuracy == 1.0
                and self.normalized_khsic > DEPENDENCE_THRESHOLD)

    def to_json(self) -> str:
        return json.dumps({"orthogonality_norm": self.orthogonality_norm,
                           "normalized_khsic": self.normalized_khsic,
                           "probe_accuracy": self.probe_accuracy,
                           "passed": self.passed}, sort_keys=True)

    def text(self) -> str:
        def mat(m):
            return "\n".join("  " + " ".join(f"{v:3g}" for v in row) for row in m)

        verdict = "PASS" if self.passed else "FAIL"
        return (f"A =\n{mat(self.a)}\nS =\n{mat(self.s)}\n"
                f"||A^T S||_F            = {self.orthogonality_norm!r}\n"
                f"normalized KHSIC       = {self.normalized_khsic:.6f}\n"
                f"threshold probe acc.   = {self.probe_accuracy!r}\n"
                f"orthogonal yet separable: {verdict}")


def cmd_counterexample(width: int = 2) -> CounterexampleReport:
    """Exact orthogonality next to total dependence on the six-row instance."""
    a, s = datasets.counterexample(width)
    labels = s[:, 0].astype(np.int64)
    acc = float(np.mean(audit.threshold_probe(a) == labels))
    return CounterexampleReport(a, s, kernels.orthogonality_norm(a, s), kernels.normalized_khsic(a, s), acc)


def gnuplot_script(csv_name: str, methods: Sequence[str]) -> str:
    """Companion gnuplot script: unfairness against relative residual per method."""
    plots = ", ".join(
        f"'< grep ^{m}, {csv_name}' using 4:5 with points title '{m}'" for m in methods
    )
    return ("set datafile separator ','\n"
            "set xlabel 'relative residual'\nset ylabel 'unfairness'\n"
            "set terminal pngcairo size 800,600\n"
            f"set output '{Path(csv_name).stem}.png'\n"
            f"plot {plots}\n")
