"""Clean pretraining, module-wise adversarial fine-tuning and AT baselines."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dwaa
from .attacks import AttackConfig, image_budget, module_wise_attack, run_attack
from .driving import ARCH, DEFAULT_BUDGETS, build_reference_model
from .errors import ContractError, NumericError
from .pipeline import MODULE_IDS, Pipeline, forward_with_noise, freeze_modules, total_loss
from .rng import Stream

log = logging.getLogger(__name__)

TRAIN_METHODS = ("clean", "ma2t", "fat", "pgd_l1", "pgd_l2", "pgd_linf")
BASELINES = ("fat", "pgd_l1", "pgd_l2", "pgd_linf")
BASELINE_EPS = 0.2
SKIP_LIMIT = 0.01


def default_attack(method: str) -> AttackConfig | None:
    """Inner-maximisation attack used while training with ``method``."""
    if method == "clean":
        return None
    if method == "ma2t":
        return AttackConfig("pgd", "linf", dict(DEFAULT_BUDGETS), steps=5, restarts=1)
    if method == "fat":
        return AttackConfig("fgsm", "linf", {"Images": BASELINE_EPS}, steps=1, restarts=1)
    norm = method[len("pgd_"):]
    return AttackConfig("pgd", norm, {"Images": image_budget(BASELINE_EPS, norm)}, steps=5, restarts=1)


@dataclass
class TrainConfig:
    method: str = "clean"
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float | None = None  # 1e-3 for clean pretraining, 1e-4 for fine-tuning
    optimizer: str = "adam"
    attack: AttackConfig | None = None
    dwaa_enabled: bool = True
    dwaa_r: float = 0.2
    update_period: int = 100
    frozen: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.method not in TRAIN_METHODS:
            raise ContractError(f"unknown training method {self.method!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate is None:
            self.learning_rate = 1e-3 if self.method == "clean" else 1e-4
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.attack is None:
            self.attack = default_attack(self.method)
        elif isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.method == "fat" and (self.attack.method != "fgsm" or self.attack.steps > 1):
            raise ContractError("fat trains on single-step FGSM; steps must be 1")
        if self.method in BASELINES:
            extra = [s for s, e in self.attack.budgets.items() if e > 0 and s != "Images"]
            if extra:
                raise ContractError(f"baselines perturb Images only, got {extra}")
        unknown = set(self.frozen) - set(MODULE_IDS)
        if unknown:
            raise ContractError(f"unknown module ids to freeze: {sorted(unknown)}")
        self.frozen = tuple(self.frozen)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------------ checkpoint

CHECKPOINT_MAGIC = b"MA2TCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Model parameters plus training provenance.

    File layout (all integers little-endian):

    * 8 bytes magic ``MA2TCKPT``, u32 format version, u32 header length
    * UTF-8 JSON header: ``arch``, ``method``, ``seed``, ``epoch``, ``dwaa``
      (weight-adaptation snapshot or null), ``n_params``
    * per parameter: u32 name length, name (UTF-8), u32 ndim, ndim x u32
      dims, then the values as flat row-major float64
    """

    params: dict
    arch: str = ARCH
    method: str = "clean"
    seed: int = 0
    epoch: int = 0
    dwaa: dict | None = None
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_pipeline(cls, pipeline: Pipeline, **meta) -> "Checkpoint":
        return cls(pipeline.state_dict(), pipeline.arch, **meta)

    def to_pipeline(self) -> Pipeline:
        if self.arch != ARCH:
            raise ContractError(f"checkpoint architecture {self.arch!r} is not {ARCH!r}")
        model = build_reference_model(0)
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        header = {"arch": self.arch, "method": self.method, "seed": self.seed, "epoch": self.epoch,
                  "dwaa": self.dwaa, "n_params": len(self.params)}
        blob = json.dumps(header, sort_keys=True).encode()
        parts = [CHECKPOINT_MAGIC, np.array([self.version, len(blob)], dtype="<u4").tobytes(), blob]
        for name, arr in self.params.items():
            encoded = name.encode()
            parts.append(np.array([len(encoded)], dtype="<u4").tobytes())
            parts.append(encoded)
            parts.append(np.array([arr.ndim, *arr.shape], dtype="<u4").tobytes())
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ContractError("not a checkpoint file")
        version, length = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=8))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + length].decode())
        offset = 16 + length
        params = {}
        for _ in range(header["n_params"]):
            (n,) = np.frombuffer(raw, dtype="<u4", count=1, offset=offset)
            offset += 4
            name = raw[offset:offset + n].decode()
            offset += n
            (ndim,) = np.frombuffer(raw, dtype="<u4", count=1, offset=offset)
            offset += 4
            shape = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=ndim, offset=offset))
            offset += 4 * ndim
            count = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset) \
                .reshape(shape).astype(np.float64)
            offset += 8 * count
        return cls(params, header["arch"], header["method"], header["seed"], header["epoch"],
                   header["dwaa"], version)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


class TrainingAborted(NumericError):
    def __init__(self, message: str, checkpoint: Checkpoint | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    batch_log: list = field(default_factory=list)
    dwaa: dwaa.DwaaState | None = None
    skipped: int = 0
    config: TrainConfig | None = None


# ---------------------------------------------------------------- training loop

def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = Stream(seed, "shuffle", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _train(pipeline: Pipeline, dataset, cfg: TrainConfig, start_epoch: int = 0) -> TrainResult:
    freeze_modules(pipeline, cfg.frozen)
    params = pipeline.parameters(trainable_only=True)
    opt = ad.OptimizerState(cfg.optimizer, cfg.learning_rate)
    use_dwaa = cfg.method == "ma2t" and cfg.dwaa_enabled
    state = dwaa.DwaaState(r=cfg.dwaa_r, update_period=cfg.update_period) if use_dwaa else None
    attack = cfg.attack
    active = attack.active_sites() if attack is not None else []
    per_epoch = -(-len(dataset) // cfg.batch_size)
    planned = per_epoch * cfg.epochs
    batch_log, window = [], []
    skipped = 0
    b = 0
    last_good = Checkpoint.from_pipeline(pipeline, method=cfg.method, seed=cfg.seed, epoch=start_epoch)

    for epoch in range(cfg.epochs):
        for idx in _batches(len(dataset), cfg.batch_size, cfg.seed, start_epoch + epoch):
            b += 1
            obs, labels = dataset.batch(idx)
            noise = None
            if active:
                try:
                    stream = Stream(cfg.seed, "attack", start_epoch + epoch, b)
                    if cfg.method == "ma2t":
                        pert = module_wise_attack(pipeline, obs, labels, attack, stream)
                    else:
                        pert = run_attack(pipeline, obs, labels, attack, stream)
                except NumericError as exc:
                    skipped += 1
                    log.warning("batch %d skipped: %s", b, exc)
                    batch_log.append({"batch": b, **{m: float("nan") for m in MODULE_IDS},
                                      "total": float("nan"), "skipped": 1})
                    if skipped > SKIP_LIMIT * planned:
                        raise TrainingAborted(f"{skipped} of {planned} batches failed", last_good)
                    continue
                noise = {s: ad.Tensor._wrap(pert.deltas[s]) for s in active}
            weights = dwaa.current_weights(state) if state is not None else None
            try:
                with ad.Tape() as tape:
                    _, breakdown = forward_with_noise(pipeline, obs, labels, noise)
                    loss = total_loss(breakdown, weights)
                    grads = ad.backward(loss, tape)
            except NumericError as exc:
                raise TrainingAborted(f"non-finite loss at batch {b}: {exc}", last_good) from exc
            if params:
                ad.optimizer_step(params, grads, opt)
            values = breakdown.values()
            batch_log.append({"batch": b, **values, "total": loss.item(), "skipped": 0})
            window.append([values[m] for m in MODULE_IDS])
            if state is not None and b % cfg.update_period == 0:
                dwaa.step(state, np.mean(window, axis=0))
                window = []
        last_good = Checkpoint.from_pipeline(pipeline, method=cfg.method, seed=cfg.seed,
                                             epoch=start_epoch + epoch + 1)
    last_good.dwaa = state.snapshot() if state is not None else None
    return TrainResult(last_good, batch_log, state, skipped, cfg)


def pretrain_clean(dataset, cfg: TrainConfig | None = None, model_seed: int | None = None) -> TrainResult:
    """Train the reference model from its seeded initialisation on the unweighted loss."""
    cfg = cfg or TrainConfig()
    if cfg.method != "clean":
        raise ContractError("pretrain_clean needs method='clean'")
    pipeline = build_reference_model(cfg.seed if model_seed is None else model_seed)
    return _train(pipeline, dataset, cfg)


def finetune(pretrained: Checkpoint, dataset, cfg: TrainConfig) -> TrainResult:
    """Continue training ``pretrained`` with the method in ``cfg``."""
    pipeline = pretrained.to_pipeline()
    return _train(pipeline, dataset, cfg, start_epoch=pretrained.epoch)


def finetune_ma2t(pretrained: Checkpoint, dataset, cfg: TrainConfig | None = None) -> TrainResult:
    cfg = cfg or TrainConfig(method="ma2t", epochs=3)
    if cfg.method != "ma2t":
        raise ContractError("finetune_ma2t needs method='ma2t'")
    return finetune(pretrained, dataset, cfg)


def finetune_baseline(pretrained: Checkpoint, dataset, cfg: TrainConfig) -> TrainResult:
    if cfg.method not in BASELINES:
        raise ContractError(f"baseline method must be one of {BASELINES}")
    return finetune(pretrained, dataset, cfg)


# ------------------------------------------------------------------------ logs

BATCH_COLUMNS = ["batch"] + [f"L_{m}" for m in MODULE_IDS] + ["L_total", "skipped"]


def run_dir_name(cfg: TrainConfig) -> str:
    return f"{cfg.method}-{cfg.config_hash()[:12]}-s{cfg.seed}"


def train_log_emit(result: TrainResult, out_dir, force: bool = False) -> Path:
    """Write batches.csv, dwaa_weights.csv, checkpoint.ckpt and config.json."""
    cfg = result.config
    run = Path(out_dir) / run_dir_name(cfg)
    if run.exists() and any(run.iterdir()) and not force:
        raise FileExistsError(f"run directory {run} exists; pass force to overwrite")
    run.mkdir(parents=True, exist_ok=True)
    with open(run / "batches.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BATCH_COLUMNS)
        for row in result.batch_log:
            writer.writerow([row["batch"]] + [repr(float(row[m])) for m in MODULE_IDS]
                            + [repr(float(row["total"])), row["skipped"]])
    if result.dwaa is not None:
        dwaa.write_trajectory_csv(run / "dwaa_weights.csv", result.dwaa)
    result.checkpoint.save(run / "checkpoint.ckpt")
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    return run


def validation_loss(checkpoint: Checkpoint, dataset, batch_size: int = 64) -> float:
    """Mean unweighted total loss over ``dataset`` without perturbation."""
    model = checkpoint.to_pipeline()
    total, n = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        obs, labels = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        _, breakdown = forward_with_noise(model, obs, labels)
        total += sum(breakdown.per_sample[m].data.sum() for m in MODULE_IDS)
        n += len(obs)
    return total / n
