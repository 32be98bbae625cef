"""Training: Adam optimization, early stopping, checkpoints, generalization.

The run is fully determined by (seed, config, manifest): epoch shuffles
draw from a (seed, epoch) stream, dropout from a (seed, epoch, step)
stream, and each sample's augmentation from a (seed, epoch, record-index)
stream, so results are invariant to the augmentation worker count.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .augment import AugmentSpec, apply_pipeline
from .errors import (
    BadMagic,
    CorruptPayload,
    EmptySplit,
    NonFiniteGradient,
    NumericalError,
    SingleClassSplit,
    VersionMismatch,
)
from .evalstats import ScoredSet, auc
from .manifest import ScanRecord
from .model import Model, ModelConfig, build_model
from .nifti import Volume, load_volume
from .tensor import Parameter, Tape, Tensor, backward

# sub-stream tags for SeedSequence derivation
_STREAM_SHUFFLE = 1
_STREAM_DROPOUT = 2
_STREAM_AUGMENT = 3

CHECKPOINT_MAGIC = b"SZDL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the published training setup."""

    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 1e-4
    batch_size: int = 5
    max_epochs: int = 300
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    precision: str = "float32"
    augment: bool = True
    augment_spec: AugmentSpec = field(default_factory=AugmentSpec)
    eval_batch_size: int = 16
    workers: int = 1

    def validate(self) -> None:
        self.model.validate()
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.augment:
            self.augment_spec.validate()

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "seed": self.seed,
            "precision": self.precision,
            "augment": self.augment,
            "augment_spec": self.augment_spec.to_dict(),
            "eval_batch_size": self.eval_batch_size,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        allowed = set(cls().to_dict())
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "model" in kwargs:
            kwargs["model"] = ModelConfig.from_dict(kwargs["model"])
        if "augment_spec" in kwargs:
            kwargs["augment_spec"] = AugmentSpec.from_dict(kwargs["augment_spec"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Parameter], **kwargs) -> "AdamState":
        return cls(m={p.name: np.zeros_like(p.data) for p in params},
                   v={p.name: np.zeros_like(p.data) for p in params}, **kwargs)


def adam_step(params: list[Parameter], grads: list[np.ndarray], state: AdamState,
              lr: float) -> tuple[list[Parameter], AdamState]:
    """One Adam update with bias correction; mutates params and state in place."""
    for p, g in zip(params, grads):
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"gradient of {p.name} is not finite")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g in zip(params, grads):
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# history and early stopping


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_auc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_auc!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"records": [[r.epoch, r.train_loss, r.val_loss, r.val_auc]
                            for r in self.records],
                "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainHistory":
        return cls(records=[EpochRecord(*row) for row in data["records"]],
                   best_epoch=data["best_epoch"], stop_reason=data["stop_reason"])


class EarlyStopTracker:
    """Stop when the metric fails to improve by min_delta for `patience` epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch; returns True if this is a new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# data plumbing


class VolumeCache:
    """Loads each scan once; hands out Volume views keyed by record."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, Volume] = {}

    def get(self, record: ScanRecord) -> Volume:
        vol = self._cache.get(record.scan_path)
        if vol is None:
            path = Path(record.scan_path)
            if not path.is_absolute():
                path = self.root / path
            vol = load_volume(path)
            self._cache[record.scan_path] = vol
        return vol


def _split_records(records: list[ScanRecord], split: str) -> list[ScanRecord]:
    return [r for r in records if r.split == split]


def _require_two_class_split(records: list[ScanRecord], name: str) -> None:
    if not records:
        raise EmptySplit(f"{name} split is empty")
    labels = {r.label for r in records}
    if len(labels) < 2:
        raise SingleClassSplit(f"{name} split holds a single class")


def _stack_batch(volumes: list[Volume], dtype) -> Tensor:
    data = np.stack([v.data for v in volumes])[:, None]
    return Tensor(data.astype(dtype, copy=False))


def _augment_one(args):
    volume, spec, seed_key = args
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    return apply_pipeline(volume, spec, rng)


# ---------------------------------------------------------------------------
# training loop


def fit(config: TrainConfig, records: list[ScanRecord], data_root=".",
        ) -> tuple[Model, AdamState, TrainHistory]:
    """Optimize the model on the train split, tracking the best epoch by
    validation loss; returns the best-epoch model, its Adam state and the
    per-epoch history."""
    config.validate()
    train = _split_records(records, "train")
    val = _split_records(records, "val")
    _require_two_class_split(train, "train")
    _require_two_class_split(val, "val")

    cache = VolumeCache(Path(data_root))
    dtype = config.dtype
    model = build_model(config.model, seed=config.seed, dtype=dtype)
    adam = AdamState.for_params(model.parameters())
    history = TrainHistory()
    tracker = EarlyStopTracker(config.patience, config.min_delta)
    best: Optional[dict] = None
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    try:
        for epoch in range(1, config.max_epochs + 1):
            shuffle_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, _STREAM_SHUFFLE, epoch]))
            order = shuffle_rng.permutation(len(train))

            epoch_loss = 0.0
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                batch_records = [train[i] for i in idx]
                volumes = [cache.get(r) for r in batch_records]
                if config.augment:
                    jobs = [(vol, config.augment_spec,
                             [config.seed, _STREAM_AUGMENT, epoch, int(i)])
                            for vol, i in zip(volumes, idx)]
                    mapper = pool.map if pool is not None else map
                    volumes = list(mapper(_augment_one, jobs))
                x = _stack_batch(volumes, dtype)
                labels = np.array([r.label for r in batch_records])

                tape = Tape()
                drop_rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, _STREAM_DROPOUT, epoch, step]))
                result = model.apply(x, mode="train", tape=tape, rng=drop_rng)
                loss = ops.cross_entropy(result.logits, labels, tape=tape)
                if not np.isfinite(loss.data):
                    raise NumericalError(f"non-finite training loss at epoch {epoch}")
                model.zero_grad()
                backward(tape, loss)
                params = model.parameters()
                adam_step(params, [p.grad for p in params], adam, config.learning_rate)
                epoch_loss += loss.item() * len(batch_records)

            train_loss = epoch_loss / len(train)
            val_loss, val_scores = _evaluate(model, val, cache, config)
            val_auc = auc(ScoredSet(val_scores, np.array([r.label for r in val])))
            history.records.append(EpochRecord(epoch, train_loss, val_loss, val_auc))

            if tracker.update(val_loss):
                history.best_epoch = epoch
                best = {"model": model.snapshot(),
                        "adam": {"m": {k: a.copy() for k, a in adam.m.items()},
                                 "v": {k: a.copy() for k, a in adam.v.items()},
                                 "t": adam.t}}
            if tracker.should_stop:
                history.stop_reason = "early-stop"
                break
        else:
            history.stop_reason = "max-epochs"
    finally:
        if pool is not None:
            pool.shutdown()

    if best is not None:
        model.restore(best["model"])
        adam.m = best["adam"]["m"]
        adam.v = best["adam"]["v"]
        adam.t = best["adam"]["t"]
    return model, adam, history


def _evaluate(model: Model, records: list[ScanRecord], cache: VolumeCache,
              config: TrainConfig) -> tuple[float, np.ndarray]:
    """Eval-mode loss and class-1 scores over one split."""
    total = 0.0
    scores = []
    for start in range(0, len(records), config.eval_batch_size):
        chunk = records[start:start + config.eval_batch_size]
        x = _stack_batch([cache.get(r) for r in chunk], config.dtype)
        labels = np.array([r.label for r in chunk])
        result = model.apply(x, mode="eval")
        loss = ops.cross_entropy(result.logits, labels)
        if not np.isfinite(loss.data):
            raise NumericalError("non-finite validation loss")
        total += loss.item() * len(chunk)
        scores.append(result.probs.data[:, 1].astype(np.float64))
    return total / len(records), np.concatenate(scores)


def score_records(model: Model, records: list[ScanRecord], data_root=".",
                  batch_size: int = 16) -> ScoredSet:
    """Eval-mode likelihood scores for a record list (e.g. the test split)."""
    cache = VolumeCache(Path(data_root))
    scores = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        x = _stack_batch([cache.get(r) for r in chunk], model.dtype)
        result = model.apply(x, mode="eval")
        scores.append(result.probs.data[:, 1].astype(np.float64))
    return ScoredSet(np.concatenate(scores), np.array([r.label for r in records]),
                     subject_ids=tuple(r.subject_id for r in records))


# ---------------------------------------------------------------------------
# checkpoints


def _array_index(model: Model, adam: Optional[AdamState]) -> list[tuple[str, str, np.ndarray]]:
    entries = [("param", p.name, p.data) for p in model.parameters()]
    for name in sorted(model.bn_states):
        entries.append(("bn_mean", name, model.bn_states[name].mean))
        entries.append(("bn_var", name, model.bn_states[name].var))
    if adam is not None:
        for name in sorted(adam.m):
            entries.append(("adam_m", name, adam.m[name]))
            entries.append(("adam_v", name, adam.v[name]))
    return entries


def save_checkpoint(model: Model, state: Optional[AdamState], history: Optional[TrainHistory],
                    path) -> None:
    """Binary checkpoint: magic, version, JSON metadata, float32 LE arrays."""
    entries = _array_index(model, state)
    meta = {
        "model_config": model.config.to_dict(),
        "dtype": str(model.dtype),
        "adam": None if state is None else {"t": state.t, "beta1": state.beta1,
                                            "beta2": state.beta2, "eps": state.eps},
        "history": None if history is None else history.to_dict(),
        "arrays": [{"role": role, "name": name, "shape": list(arr.shape)}
                   for role, name, arr in entries],
    }
    blob = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, Optional[AdamState], Optional[TrainHistory]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"checkpoint magic {raw[:4]!r} != {CHECKPOINT_MAGIC!r}")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header_end = 16 + meta_len
    if len(raw) < header_end:
        raise CorruptPayload("metadata block truncated")
    meta = json.loads(raw[16:header_end].decode("utf-8"))

    dtype = np.dtype(meta["dtype"])
    config = ModelConfig.from_dict(meta["model_config"])
    model = build_model(config, seed=0, dtype=dtype)
    adam_meta = meta["adam"]
    adam = None if adam_meta is None else AdamState.for_params(
        model.parameters(), t=adam_meta["t"], beta1=adam_meta["beta1"],
        beta2=adam_meta["beta2"], eps=adam_meta["eps"])

    offset = header_end
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if len(raw) < offset + nbytes:
            raise CorruptPayload(f"array {entry['name']} truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=nbytes // 4,
                            offset=offset).reshape(shape).astype(dtype)
        offset += nbytes
        role, name = entry["role"], entry["name"]
        if role == "param":
            model.params[name].data = arr.copy()
        elif role == "bn_mean":
            model.bn_states[name].mean = arr.copy()
        elif role == "bn_var":
            model.bn_states[name].var = arr.copy()
        elif role == "adam_m":
            adam.m[name] = arr.copy()
        elif role == "adam_v":
            adam.v[name] = arr.copy()
        else:
            raise CorruptPayload(f"unknown array role {role!r}")

    history = None if meta["history"] is None else TrainHistory.from_dict(meta["history"])
    return model, adam, history


# ---------------------------------------------------------------------------
# cross-site generalization


def run_generalization(config: TrainConfig, records: list[ScanRecord], held_site: str,
                       data_root=".") -> dict:
    """Hold one site out as the test set, train on the rest, evaluate.

    Returns the standard evaluation report tagged with the held-out site,
    plus the trained model and history under private keys.
    """
    from .manifest import hold_out_site  # local import to avoid cycle at module load

    assigned = hold_out_site(records, held_site, seed=config.seed)
    model, adam, history = fit(config, assigned, data_root=data_root)
    test = _split_records(assigned, "test")
    scored = score_records(model, test, data_root=data_root,
                           batch_size=config.eval_batch_size)
    from .evalstats import summarize

    summary = summarize(scored)
    report = {
        "held_out_site": held_site,
        "n_test": len(test),
        "auc": summary.auc,
        "threshold": 0.5,
        "accuracy": summary.accuracy,
        "sensitivity": summary.sensitivity,
        "specificity": summary.specificity,
        "operating_threshold": summary.operating_threshold,
        "test_records": [{"subject_id": r.subject_id, "site": r.site,
                          "label": r.label, "split": r.split} for r in test],
    }
    return {"report": report, "model": model, "adam": adam, "history": history,
            "scored": scored, "records": assigned}
