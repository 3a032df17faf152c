"""Robustness matrices: white-box, black-box transfer and natural corruption."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from .attacks import AttackConfig, image_budget, run_attack
from .driving import DEFAULT_BUDGETS, METRICS, sample_metrics
from .errors import ContractError
from .pipeline import Pipeline, forward_with_noise
from .rng import Stream
from .trainer import Checkpoint

REPORT_SCHEMA_VERSION = 1
CORRUPTIONS = ("contrast", "frost", "snow", "gaussian_noise", "shot_noise", "spatter")
SEVERITY_TABLES = {
    "contrast": (0.8, 0.6, 0.45, 0.3, 0.2),
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60, 25, 12, 5, 3),
    "snow": (2, 4, 6, 8, 12),
    "frost": (0.15, 0.25, 0.35, 0.45, 0.55),
    "spatter": (2, 4, 6, 10, 14),
}


@dataclass
class AttackSpec:
    """One white-box row: an attack configuration plus a display name."""

    name: str
    config: AttackConfig

    def describe(self) -> dict:
        return {"name": self.name, **self.config.describe()}


def image_attack(method: str, norm: str, eps: float = 0.2, steps: int = 5, restarts: int = 5,
                 objective: str = "total_loss") -> AttackSpec:
    label = {"fgsm": "FGSM", "mifgsm": "MI-FGSM", "pgd": "PGD"}[method]
    cfg = AttackConfig(method, norm, {"Images": image_budget(eps, norm)},
                       steps=1 if method == "fgsm" else steps, restarts=restarts, objective=objective)
    return AttackSpec(f"{label}-{norm}", cfg)


def module_attack(objective: str = "total_loss", steps: int = 5, restarts: int = 5,
                  budgets: dict | None = None) -> AttackSpec:
    names = {"total_loss": "Module-wise", "sub_loss": "Sub-loss", "plan_loss": "Plan-targeted"}
    cfg = AttackConfig("pgd", "linf", dict(budgets or DEFAULT_BUDGETS), steps=steps,
                       restarts=restarts, objective=objective)
    return AttackSpec(f"{names[objective]} PGD-linf", cfg)


def adaptive_attacks(steps: int = 5, restarts: int = 5, budgets: dict | None = None) -> list:
    """Plan-targeted, module-wise and sub-loss attacks over all five sites."""
    return [module_attack(o, steps, restarts, budgets) for o in ("plan_loss", "total_loss", "sub_loss")]


def standard_attacks(eps: float = 0.2, steps: int = 5, restarts: int = 5) -> list:
    """The five image attacks of the white-box table."""
    return [image_attack("pgd", "l1", eps, steps, restarts),
            image_attack("pgd", "l2", eps, steps, restarts),
            image_attack("pgd", "linf", eps, steps, restarts),
            image_attack("fgsm", "linf", eps, steps, restarts),
            image_attack("mifgsm", "linf", eps, steps, restarts)]


@dataclass
class EvalMatrix:
    name: str
    rows: list
    descriptors: list
    mean: np.ndarray  # (rows, metrics)
    std: np.ndarray
    count: np.ndarray
    metadata: dict = field(default_factory=dict)
    columns: tuple = METRICS

    def cell(self, row: str, metric: str) -> float:
        return float(self.mean[self.rows.index(row), self.columns.index(metric)])

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": list(self.columns), "rows": [
            {"label": r, "descriptor": d,
             "mean": [float(v) for v in self.mean[i]], "std": [float(v) for v in self.std[i]],
             "count": [int(v) for v in self.count[i]]}
            for i, (r, d) in enumerate(zip(self.rows, self.descriptors))], "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalMatrix":
        rows = d["rows"]
        return cls(d["name"], [r["label"] for r in rows], [r["descriptor"] for r in rows],
                   np.array([r["mean"] for r in rows]), np.array([r["std"] for r in rows]),
                   np.array([r["count"] for r in rows], dtype=np.int64), d["metadata"],
                   tuple(d["columns"]))


def _summarise(samples: dict) -> tuple:
    """Mean, population std and count per metric, ignoring NaN (invalid) samples."""
    mean, std, count = [], [], []
    for m in METRICS:
        v = np.asarray(samples[m], dtype=np.float64)
        v = v[np.isfinite(v)]
        count.append(len(v))
        mean.append(float(v.mean()) if len(v) else 0.0)
        std.append(float(v.std()) if len(v) else 0.0)
    return mean, std, count


def _as_model(victim) -> Pipeline:
    if isinstance(victim, Pipeline):
        return victim
    if isinstance(victim, Checkpoint):
        return victim.to_pipeline()
    raise ContractError("victim must be a Checkpoint or Pipeline")


def _victim_id(victim) -> str:
    return victim.content_hash() if isinstance(victim, Checkpoint) else victim.checksum()


def _chunks(n: int, size: int) -> list:
    return [np.arange(s, min(s + size, n)) for s in range(0, n, size)]


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _collect(parts: list) -> dict:
    return {m: np.concatenate([p[m] for p in parts]) for m in METRICS}


def sample_level(model: Pipeline, dataset, perturb=None, batch_size: int = 50, threads: int = 1,
                 transform=None) -> dict:
    """Per-sample metrics over ``dataset``.

    ``perturb(chunk_index, obs, labels)`` returns a noise dict or None;
    ``transform(chunk_index, obs)`` may replace the observations first.
    """
    chunks = _chunks(len(dataset), batch_size)

    def job(item):
        k, idx = item
        obs, labels = dataset.batch(idx)
        if transform is not None:
            obs = transform(k, obs)
        noise = perturb(k, obs, labels) if perturb is not None else None
        heads, _ = forward_with_noise(model, obs, labels, noise)
        return sample_metrics(heads, labels)

    return _collect(_map(job, list(enumerate(chunks)), threads))


def _attack_perturb(model: Pipeline, cfg: AttackConfig, seed: int, row: int):
    def perturb(k, obs, labels):
        pert = run_attack(model, obs, labels, cfg, Stream(seed, "attack", row, k))
        return pert.as_noise()
    return perturb


def _subset(dataset, n_samples):
    if n_samples is None or n_samples >= len(dataset):
        return dataset
    return dataset.subset(np.arange(n_samples))


def evaluate_whitebox(victim, dataset, attacks, restarts: int | None = 5, seeds=(0,),
                      n_samples: int | None = None, batch_size: int = 50, threads: int = 1,
                      name: str = "whitebox") -> EvalMatrix:
    """Clean row plus one row per attack crafted against the victim itself."""
    model = _as_model(victim)
    model.set_requires_grad(False)
    data = _subset(dataset, n_samples)
    rows, descriptors, stats = ["Clean"], [{"name": "Clean"}], []
    pooled = [[] for _ in range(len(attacks) + 1)]
    for seed in seeds:
        pooled[0].append(sample_level(model, data, None, batch_size, threads))
        for r, spec in enumerate(attacks, start=1):
            cfg = spec.config if restarts is None else spec.config.replace(restarts=restarts)
            pooled[r].append(sample_level(model, data, _attack_perturb(model, cfg, seed, r),
                                          batch_size, threads))
    for spec in attacks:
        rows.append(spec.name)
        cfg = spec.config if restarts is None else spec.config.replace(restarts=restarts)
        descriptors.append({"name": spec.name, **cfg.describe()})
    for parts in pooled:
        stats.append(_summarise(_collect(parts)))
    meta = {"victim": _victim_id(victim), "dataset": dataset_id(data), "restarts": restarts,
            "seeds": list(seeds), "n_samples": len(data)}
    return _matrix(name, rows, descriptors, stats, meta)


def _matrix(name, rows, descriptors, stats, meta) -> EvalMatrix:
    mean = np.array([s[0] for s in stats])
    std = np.array([s[1] for s in stats])
    count = np.array([s[2] for s in stats], dtype=np.int64)
    return EvalMatrix(name, rows, descriptors, mean, std, count, meta)


def dataset_id(dataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.observations).tobytes())
    h.update(np.ascontiguousarray(dataset.labels.expert_waypoints).tobytes())
    return h.hexdigest()[:16]


def evaluate_blackbox(victim, surrogates: dict, dataset, attacks, seeds=(0,), n_samples: int | None = None,
                      batch_size: int = 50, threads: int = 1, name: str = "blackbox") -> EvalMatrix:
    """Transfer image-only attacks from each surrogate; keep the strongest per surrogate.

    Strength is the increase of mean plan error (avg_l2) over the clean row.
    """
    model = _as_model(victim)
    model.set_requires_grad(False)
    data = _subset(dataset, n_samples)
    clean = _collect([sample_level(model, data, None, batch_size, threads) for _ in seeds])
    clean_stats = _summarise(clean)
    rows, descriptors, stats = ["Clean"], [{"name": "Clean"}], [clean_stats]
    for sname, surrogate in surrogates.items():
        smodel = _as_model(surrogate)
        smodel.set_requires_grad(False)
        candidates = []
        for r, spec in enumerate(attacks, start=1):
            if set(s for s, e in spec.config.budgets.items() if e > 0) - {"Images"}:
                raise ContractError("black-box attacks perturb the Images site only")
            parts = [sample_level(model, data, _attack_perturb(smodel, spec.config, seed, r),
                                  batch_size, threads) for seed in seeds]
            st = _summarise(_collect(parts))
            candidates.append((st[0][0] - clean_stats[0][0], spec, st))
        best = max(range(len(candidates)), key=lambda i: candidates[i][0])
        degradation, spec, st = candidates[best]
        rows.append(f"{sname} ({spec.name})")
        descriptors.append({"name": spec.name, "surrogate": sname,
                            "surrogate_id": _victim_id(surrogate), **spec.config.describe(),
                            "degradation": degradation,
                            "candidates": {c[1].name: c[0] for c in candidates}})
        stats.append(st)
    meta = {"victim": _victim_id(victim), "dataset": dataset_id(data), "seeds": list(seeds),
            "n_samples": len(data), "selection": "max avg_l2 degradation"}
    return _matrix(name, rows, descriptors, stats, meta)


# ------------------------------------------------------------------ corruption

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ContractError(f"unknown corruption {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ContractError("severity must be in 1..5 (0 means none)")


def _frost_texture(rs: Stream, size: int) -> np.ndarray:
    coarse = rs.uniform((5, 5))
    return np.clip(ndimage.zoom(coarse, size / 5, order=1), 0.0, 1.0)[:size, :size]


def apply_corruption(obs, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one raster (C, H, W); deterministic in ``(spec, obs)``.

    Random draws do not depend on the severity, so higher severities reuse the
    draws of lower ones (nested streaks/blobs, scaled noise).
    """
    x = np.asarray(obs, dtype=np.float64)
    if spec.severity == 0:
        return x.copy()
    c, h, w = x.shape
    digest = zlib.crc32(np.ascontiguousarray(x).tobytes())
    rs = Stream(spec.seed, "corruption", CORRUPTIONS.index(spec.kind), digest)
    level = SEVERITY_TABLES[spec.kind][spec.severity - 1]
    if spec.kind == "contrast":
        out = 0.5 + level * (x - 0.5)
    elif spec.kind == "gaussian_noise":
        out = x + level * rs.normal(x.shape)
    elif spec.kind == "shot_noise":
        out = rs.poisson(level * x) / level
    elif spec.kind == "frost":
        out = (1.0 - level) * x + level * _frost_texture(rs, h)[None]
    elif spec.kind == "snow":
        out = x.copy()
        starts = rs.integers(0, h, (SEVERITY_TABLES["snow"][-1], 2))
        for r0, c0 in starts[:level]:
            for t in range(4):  # length-4 diagonal streak
                r, cc = r0 + t, c0 + t
                if r < h and cc < w:
                    out[:, r, cc] = 1.0
    else:  # spatter: 2x2 blobs on the obstacle channels where no obstacle is painted
        out = x.copy()
        empty = x[2] == 0
        starts = rs.integers(0, h - 1, (SEVERITY_TABLES["spatter"][-1], 2))
        for r0, c0 in starts[:level]:
            blob = np.zeros((h, w), dtype=bool)
            blob[r0:r0 + 2, c0:c0 + 2] = True
            out[2:4][:, blob & empty] = 1.0
    return np.clip(out, 0.0, 1.0)


def corrupt_batch(obs: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    return np.stack([apply_corruption(o, spec) for o in obs])


def evaluate_corruption(victim, dataset, kinds=CORRUPTIONS, severities=(1, 2, 3, 4, 5), seeds=(0,),
                        n_samples: int | None = None, batch_size: int = 50, threads: int = 1,
                        name: str = "corruption") -> EvalMatrix:
    model = _as_model(victim)
    model.set_requires_grad(False)
    data = _subset(dataset, n_samples)
    rows, descriptors, stats = [], [], []
    for kind in kinds:
        for sev in severities:
            parts = []
            for seed in seeds:
                spec = CorruptionSpec(kind, sev, seed)
                parts.append(sample_level(model, data, None, batch_size, threads,
                                          transform=lambda k, obs, spec=spec: corrupt_batch(obs, spec)))
            rows.append(f"{kind}@{sev}")
            descriptors.append({"kind": kind, "severity": sev, "seeds": list(seeds)})
            stats.append(_summarise(_collect(parts)))
    meta = {"victim": _victim_id(victim), "dataset": dataset_id(data), "seeds": list(seeds),
            "n_samples": len(data)}
    matrix = _matrix(name, rows, descriptors, stats, meta)
    matrix.metadata["summary_avg_l2"] = corruption_summary(matrix)
    return matrix


def corruption_summary(matrix: EvalMatrix) -> float:
    return float(matrix.mean[:, matrix.columns.index("avg_l2")].mean())


# ---------------------------------------------------------------------- report

def git_blob_hash(data: bytes) -> str:
    """The object id ``git hash-object`` assigns to ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def report_schema() -> dict:
    text = resources.files("ma2t").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def validate_report(bundle: dict) -> None:
    jsonschema.validate(bundle, report_schema())


CSV_HEADER = ["row", "descriptor"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std", "n")]


def write_matrix_csv(path, matrix: EvalMatrix) -> None:
    """One line per row: label, JSON descriptor, then mean/std/n per metric."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i, row in enumerate(matrix.rows):
            cells = []
            for j in range(len(matrix.columns)):
                cells += [repr(float(matrix.mean[i, j])), repr(float(matrix.std[i, j])),
                          int(matrix.count[i, j])]
            writer.writerow([row, json.dumps(matrix.descriptors[i], sort_keys=True)] + cells)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if dataclasses.is_dataclass(obj):
        return _plain(dataclasses.asdict(obj))
    return obj


def emit_report(matrices, metadata: dict, out_dir, inputs: dict | None = None,
                extra_csv: dict | None = None) -> Path:
    """Write ``<matrix>.csv`` files and ``report.json``; returns the bundle path.

    ``inputs`` maps a label to a file path whose git blob hash is recorded.
    ``extra_csv`` maps file names to ``(header, rows)`` for plot data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = {k: git_blob_hash(Path(p).read_bytes()) for k, p in sorted((inputs or {}).items())}
    for m in matrices:
        write_matrix_csv(out / f"{m.name}.csv", m)
    for fname, (header, rows) in sorted((extra_csv or {}).items()):
        with open(out / fname, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    bundle = {"schema_version": REPORT_SCHEMA_VERSION, "metadata": _plain(metadata),
              "input_hashes": hashes, "matrices": [_plain(m.to_dict()) for m in matrices]}
    validate_report(bundle)
    path = out / "report.json"
    path.write_text(json.dumps(bundle, sort_keys=True, indent=2) + "\n")
    return path


def load_report(path) -> dict:
    bundle = json.loads(Path(path).read_text())
    validate_report(bundle)
    return bundle
