"""Adam training: self-supervised pretraining, per-site fine-tuning, checkpoints.

Pretraining minimizes bag cross-entropy on the synthetic corpus with early
stopping on validation AUC. Fine-tuning restarts from a checkpoint with a
much smaller learning rate while the merge block and the first alignment
layer's attention stay frozen (bitwise). Checkpoints are a self-describing
binary: magic + version + JSON tensor directory + packed float32 blobs.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import (
    BadMagic,
    EmptyDataset,
    FreezeNameUnresolved,
    InvariantViolation,
    ParseError,
    ShapeMismatch,
    SubjectOverlap,
    TruncatedFile,
    VersionUnsupported,
)
from .evaluation import auc_roc
from .model import ModelConfig, ModelState, bag_loss, init_params, predict_bags, \
    records_to_arrays, state_spec

logger = logging.getLogger(__name__)

PRETRAIN_LR = 1e-3
FINETUNE_LR = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
IMPROVEMENT_EPS = 1e-4
DEFAULT_FREEZE = ("cms.", "hom.layer0.attn.")
FINETUNE_TRAIN_FRACTION = 0.2  # 1:4 train:held-out subject split

CHECKPOINT_MAGIC = b"HOMN"
CHECKPOINT_VERSION = 1
_OPT_M_PREFIX = "opt.m."
_OPT_V_PREFIX = "opt.v."


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer/loop knobs. ``lr``/``freeze_set`` of None pick the stage default

    (pretraining: lr 1e-3, nothing frozen; fine-tuning: lr 1e-5, merge block
    plus first attention layer frozen).
    """

    lr: float | None = None
    batch_size: int = 512
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    freeze_set: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.lr is not None and self.lr <= 0:
            raise InvariantViolation(f"lr {self.lr} must be > 0")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvariantViolation("patience, batch_size and max_epochs must be >= 1")


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                moments: AdamMoments, t: int, lr: float,
                beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                eps: float = ADAM_EPS, frozen=frozenset()):
    """One bias-corrected Adam step; returns new params and moments.

    Frozen tensors pass through untouched — same array objects, zero moments.
    """
    if t < 1:
        raise InvariantViolation(f"step counter t={t} must be >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if name in frozen:
            new_params[name] = p
            new_m[name] = moments.m[name]
            new_v[name] = moments.v[name]
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = beta1 * moments.m[name] + (1.0 - beta1) * g
        v = beta2 * moments.v[name] + (1.0 - beta2) * (g * g)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[name] = p - step
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamMoments(m=new_m, v=new_v)


class EarlyStopping:
    """Stop after ``patience`` epochs without a metric gain above ``min_delta``."""

    def __init__(self, patience: int, min_delta: float = IMPROVEMENT_EPS):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def resolve_freeze(prefixes, state: ModelState) -> frozenset[str]:
    """Expand tensor-name prefixes; every prefix must match something."""
    frozen: set[str] = set()
    names = state.names()
    for prefix in prefixes:
        matched = [n for n in names if n.startswith(prefix)]
        if not matched:
            raise FreezeNameUnresolved(f"freeze prefix {prefix!r} matches no tensor")
        frozen.update(matched)
    return frozenset(frozen)


def subjects_of(records) -> set[str]:
    return {r.subject_id for r in records}


def check_subject_disjoint(train_records, val_records) -> None:
    overlap = subjects_of(train_records) & subjects_of(val_records)
    if overlap:
        raise SubjectOverlap(f"subjects in both splits: {sorted(overlap)[:5]} "
                             f"({len(overlap)} total)")


def split_by_subject(records, train_fraction: float, seed: int):
    """Deterministic subject-level split; both sides non-empty."""
    subjects = sorted(subjects_of(records))
    if len(subjects) < 2:
        raise EmptyDataset(f"need >= 2 subjects to split, got {len(subjects)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x511]))
    order = rng.permutation(len(subjects))
    n_train = min(max(int(round(train_fraction * len(subjects))), 1), len(subjects) - 1)
    train_subjects = {subjects[i] for i in order[:n_train]}
    train = [r for r in records if r.subject_id in train_subjects]
    val = [r for r in records if r.subject_id not in train_subjects]
    return train, val


# ---------------------------------------------------------------------------
# checkpoint container and binary format

@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        expected = state_spec(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ShapeMismatch(f"checkpoint tensors mismatch: missing {sorted(missing)}, "
                                f"extra {sorted(extra)}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ShapeMismatch(f"tensor {name}: shape {self.tensors[name].shape} "
                                    f"!= expected {shape}")
        if not self.opt_m:
            self.opt_m = {k: np.zeros(v, dtype=np.float32) for k, v in expected.items()}
        if not self.opt_v:
            self.opt_v = {k: np.zeros(v, dtype=np.float32) for k, v in expected.items()}

    def state(self, dtype=np.float64) -> ModelState:
        return ModelState.from_arrays(
            {k: v.astype(dtype) for k, v in self.tensors.items()})


def _to_f32(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}


def checkpoint_from_training(config: ModelConfig, params: dict[str, np.ndarray],
                             moments: AdamMoments, adam_t: int, metadata: dict) -> Checkpoint:
    return Checkpoint(config=config, tensors=_to_f32(params), opt_m=_to_f32(moments.m),
                      opt_v=_to_f32(moments.v), adam_t=adam_t, metadata=metadata)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    blobs = []
    offset = 0
    named = list(ckpt.tensors.items()) \
        + [(_OPT_M_PREFIX + k, v) for k, v in ckpt.opt_m.items()] \
        + [(_OPT_V_PREFIX + k, v) for k, v in ckpt.opt_v.items()]
    for name, arr in named:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": ckpt.config.to_dict(),
        "tensors": entries,
        "metadata": {**ckpt.metadata, "adam_t": ckpt.adam_t},
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is too short for a header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version > CHECKPOINT_VERSION or version < 1:
        raise VersionUnsupported(f"{path}: version {version} unsupported")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + header_len:
        raise TruncatedFile(f"{path}: header truncated")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: unreadable header: {exc}") from None
    blob = raw[16 + header_len:]
    entries = header.get("tensors", [])
    expected_blob = sum(e["len"] for e in entries)
    if expected_blob != len(blob):
        raise TruncatedFile(f"{path}: blob section is {len(blob)} bytes, "
                            f"directory says {expected_blob}")
    tensors: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    for e in entries:
        if e.get("dtype") != "f32":
            raise VersionUnsupported(f"{path}: unsupported dtype {e.get('dtype')!r}")
        lo, hi = e["offset"], e["offset"] + e["len"]
        if lo < 0 or hi > len(blob):
            raise TruncatedFile(f"{path}: tensor {e['name']} outside blob bounds")
        arr = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).copy()
        name = e["name"]
        if name.startswith(_OPT_M_PREFIX):
            opt_m[name[len(_OPT_M_PREFIX):]] = arr
        elif name.startswith(_OPT_V_PREFIX):
            opt_v[name[len(_OPT_V_PREFIX):]] = arr
        else:
            tensors[name] = arr
    metadata = dict(header.get("metadata", {}))
    adam_t = int(metadata.pop("adam_t", 0))
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(config=config, tensors=tensors, opt_m=opt_m, opt_v=opt_v,
                      adam_t=adam_t, metadata=metadata, version=version)


# ---------------------------------------------------------------------------
# training loops

def _score_records(records, state: ModelState, cfg: ModelConfig) -> np.ndarray:
    preds = predict_bags(records, state, cfg)
    return np.array([p.y_hat for p in preds])


def _swap_augment(a, b, rng):
    """Randomly swap the two chromosomes inside each pair (label-preserving)."""
    mask = rng.random(a.shape[:2]) < 0.5
    maskx = mask[:, :, None, None]
    return np.where(maskx, b, a), np.where(maskx, a, b)


def _train_loop(state: ModelState, cfg: ModelConfig, train_records, val_records,
                tcfg: TrainConfig, lr: float, frozen: frozenset[str],
                stage: str) -> Checkpoint:
    a_all, b_all, conds_all, labels_all = records_to_arrays(train_records, cfg)
    n = len(train_records)
    rng = np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 0xba7c4]))
    state.set_trainable(frozen)
    params = state.arrays()
    moments = AdamMoments.zeros_like(params)
    stopper = EarlyStopping(tcfg.patience)
    trainable = [name for name in params if name not in frozen]
    best = {"params": {k: v.copy() for k, v in params.items()},
            "moments": moments, "t": 0, "epoch": 0, "val_auc": -np.inf}
    history = []
    t = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            a = a_all[idx].astype(np.float64)
            b = b_all[idx].astype(np.float64)
            a, b = _swap_augment(a, b, rng)
            for tensor in state.tensors.values():
                tensor.grad = None
            loss = bag_loss(a, b, conds_all[idx], labels_all[idx], state, cfg)
            nm.backward(loss)
            grads = {name: (state[name].grad if state[name].grad is not None
                            else np.zeros_like(params[name]))
                     for name in trainable}
            t += 1
            params, moments = adam_update(params, grads, moments, t, lr, frozen=frozen)
            for name in trainable:
                state[name].data = params[name]
            losses.append(loss.item())
        val_scores = _score_records(val_records, state, cfg)
        val_labels = np.array([r.label for r in val_records])
        val_auc = auc_roc(val_scores, val_labels)
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_auc": val_auc})
        improved = stopper.update(val_auc, epoch)
        if improved:
            best = {"params": {k: v.copy() for k, v in params.items()},
                    "moments": AdamMoments(m={k: v.copy() for k, v in moments.m.items()},
                                           v={k: v.copy() for k, v in moments.v.items()}),
                    "t": t, "epoch": epoch, "val_auc": val_auc}
        logger.info("%s epoch %d: loss %.4f, val AUC %.4f%s", stage, epoch, train_loss,
                    val_auc, " *" if improved else "")
        if stopper.should_stop:
            logger.info("%s: no val AUC improvement for %d epochs, stopping", stage,
                        tcfg.patience)
            break
    metadata = {
        "stage": stage,
        "epoch": best["epoch"],
        "best_val_auc": best["val_auc"],
        "seed": tcfg.seed,
        "lr": lr,
        "batch_size": tcfg.batch_size,
        "patience": tcfg.patience,
        "frozen": sorted(frozen),
        "total_steps": t,
        "history": history,
    }
    return checkpoint_from_training(cfg, best["params"], best["moments"], best["t"], metadata)


def pretrain(train_records, val_records, cfg: ModelConfig, tcfg: TrainConfig) -> Checkpoint:
    """Self-supervised pretraining on normal vs artificial-abnormal bags."""
    if not train_records or not val_records:
        raise EmptyDataset("pretraining needs non-empty train and validation sets")
    check_subject_disjoint(train_records, val_records)
    state = init_params(cfg, tcfg.seed)
    lr = tcfg.lr if tcfg.lr is not None else PRETRAIN_LR
    frozen = resolve_freeze(tcfg.freeze_set or (), state)
    return _train_loop(state, cfg, train_records, val_records, tcfg, lr, frozen, "pretrain")


def finetune(ckpt: Checkpoint, site_records, tcfg: TrainConfig) -> Checkpoint:
    """Adapt a pretrained model to one site's data distribution.

    Subjects split 1:4 (train : held-out); the held-out part drives early
    stopping. The merge block and the first alignment layer's attention are
    frozen unless the config names a different freeze set.
    """
    if not site_records:
        raise EmptyDataset("fine-tuning needs site records")
    cfg = ckpt.config
    state = ckpt.state(np.float64)
    lr = tcfg.lr if tcfg.lr is not None else FINETUNE_LR
    freeze_set = DEFAULT_FREEZE if tcfg.freeze_set is None else tcfg.freeze_set
    frozen = resolve_freeze(freeze_set, state)
    train_records, val_records = split_by_subject(site_records, FINETUNE_TRAIN_FRACTION,
                                                  tcfg.seed)
    return _train_loop(state, cfg, train_records, val_records, tcfg, lr, frozen, "finetune")
