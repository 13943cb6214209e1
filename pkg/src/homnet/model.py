"""The three-block pair-comparison network.

A chromosome's two gray-mean sequences are merged by a strided conv into
per-region features (the merge block), enriched with type/band information
and two residual MLPs. The alignment block cross-attends each region of one
homologue against all regions of the other, in both directions and over
several layers, and compresses both aligned maps into one pair-difference
vector. The bag block weighs the m pair differences of a subject and emits
a single abnormality probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .data import BagRecord, ChromosomeSequence, ConditionEncoding, encode_condition
from .errors import EmptyBag, InvariantViolation, ShapeMismatch
from .numerics import Tensor

COND_LEN = 24 + 4
ATTN_NORMS = ("softmax", "raw_eps")
RAW_NORM_FLOOR = 1e-6
PROB_EPS = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; region count n_r and head width d_a are derived."""

    d: int = 512
    k_mg: int = 32
    l_r: int = 64
    n_h: int = 4
    hom_layers: int = 2
    l_h: int = 128
    m: int = 5
    hidden_act: str = "relu"
    attn_norm: str = "softmax"

    def __post_init__(self):
        for name in ("d", "k_mg", "l_r", "n_h", "hom_layers", "l_h", "m"):
            if int(getattr(self, name)) < 1:
                raise InvariantViolation(f"config {name} must be >= 1")
        if self.d % self.k_mg != 0:
            raise InvariantViolation(f"d={self.d} not divisible by k_mg={self.k_mg}")
        if self.l_r % self.n_h != 0:
            raise InvariantViolation(f"l_r={self.l_r} not divisible by n_h={self.n_h}")
        if self.l_h % 2 != 0:
            raise InvariantViolation(f"l_h={self.l_h} must be even (bag MLP halves it)")
        if self.hidden_act not in ("relu", "sigmoid"):
            raise InvariantViolation(f"hidden_act {self.hidden_act!r} not in ('relu', 'sigmoid')")
        if self.attn_norm not in ATTN_NORMS:
            raise InvariantViolation(f"attn_norm {self.attn_norm!r} not in {ATTN_NORMS}")

    @property
    def n_r(self) -> int:
        return self.d // self.k_mg

    @property
    def d_a(self) -> int:
        return self.l_r // self.n_h

    def to_dict(self) -> dict:
        return {
            "d": self.d, "k_mg": self.k_mg, "l_r": self.l_r, "n_h": self.n_h,
            "hom_layers": self.hom_layers, "l_h": self.l_h, "m": self.m,
            "hidden_act": self.hidden_act, "attn_norm": self.attn_norm,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def override(self, **kwargs) -> "ModelConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def state_spec(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named-tensor layout; definition order is the canonical order."""
    spec: dict[str, tuple[int, ...]] = {
        "cms.merge_kernels": (cfg.l_r, 1, 2, cfg.k_mg),
        "cms.w_info": (COND_LEN, cfg.n_r * cfg.l_r),
        "cms.w_r1": (cfg.l_r, cfg.l_r),
        "cms.w_r2": (cfg.l_r, cfg.l_r),
        "cms.w_r3": (cfg.n_r, cfg.n_r),
        "cms.w_r4": (cfg.n_r, cfg.n_r),
    }
    for layer in range(cfg.hom_layers):
        base = f"hom.layer{layer}.attn"
        for head in range(cfg.n_h):
            spec[f"{base}.head{head}.w_q"] = (cfg.l_r, cfg.d_a)
            spec[f"{base}.head{head}.w_k"] = (cfg.l_r, cfg.d_a)
            spec[f"{base}.head{head}.w_v"] = (cfg.l_r, cfg.d_a)
        spec[f"{base}.w_head"] = (cfg.n_h * cfg.d_a, cfg.l_r)
        spec[f"{base}.w_diff"] = (cfg.l_r, cfg.l_r)
    spec["hom.w_hom"] = (2 * cfg.n_r * cfg.l_r, cfg.l_h)
    spec["hom.b_hom"] = (cfg.l_h,)
    spec["bag.mlp.w1"] = (cfg.l_h, cfg.l_h // 2)
    spec["bag.mlp.b1"] = (cfg.l_h // 2,)
    spec["bag.mlp.w2"] = (cfg.l_h // 2, 1)
    spec["bag.mlp.b2"] = (1,)
    spec["bag.w_bag"] = (cfg.l_h, 1)
    spec["bag.b_bag"] = (1,)
    return spec


class ModelState:
    """All learnable tensors, addressed by dotted names."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def astype(self, dtype) -> "ModelState":
        return ModelState({
            name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, op=name)
            for name, t in self.tensors.items()
        })

    def copy(self) -> "ModelState":
        return ModelState({
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, op=name)
            for name, t in self.tensors.items()
        })

    def set_trainable(self, frozen_names=()) -> None:
        frozen = set(frozen_names)
        for name, t in self.tensors.items():
            t.requires_grad = name not in frozen

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ModelState":
        return cls({
            name: Tensor(np.array(arr), requires_grad=requires_grad, op=name)
            for name, arr in arrays.items()
        })


READOUT_INIT_SCALE = 0.1


def init_params(cfg: ModelConfig, seed: int) -> ModelState:
    """Uniform Glorot weights, zero biases; deterministic in the seed.

    The final readout ``bag.w_bag`` is drawn at a tenth of the Glorot bound:
    the pooled pair differences are nonnegative (relu), so a full-scale
    random readout hands every bag one large shared logit offset, and the
    resulting one-sided loss pressure slams the aggregation gates shut
    within a few optimizer steps. A small (but nonzero, so gradients still
    reach the trunk) readout keeps the start balanced.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in state_spec(cfg).items():
        if len(shape) == 1:
            data = np.zeros(shape, dtype=np.float64)
        else:
            if len(shape) == 4:  # conv kernels: (out_ch, in_ch, kh, kw)
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0]
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            if name == "bag.w_bag":
                bound *= READOUT_INIT_SCALE
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, op=name)
    return ModelState(tensors)


def glorot_bound(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:
        fan_in, fan_out = shape[1] * shape[2] * shape[3], shape[0]
    else:
        fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass(frozen=True)
class Prediction:
    """Bag probability plus the m per-pair aggregation weights."""

    y_hat: float
    alphas: np.ndarray

    def __post_init__(self):
        if not (0.0 < self.y_hat < 1.0):
            raise InvariantViolation(f"y_hat {self.y_hat} not strictly inside (0, 1)")
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 1 or np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
            raise InvariantViolation("alphas must be a 1-D vector strictly inside (0, 1)")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)


# ---------------------------------------------------------------------------
# batched graph construction; leading axis is always the chromosome/pair/bag
# batch so training and inference share one code path

def _cms_batch(x: Tensor, cond: Tensor, state: ModelState, cfg: ModelConfig) -> Tensor:
    """(N, 1, 2, d) sequences + (N, 28) conditions -> (N, n_r, l_r) regions."""
    n = x.data.shape[0]
    merged = nm.conv2d_strided(x, state["cms.merge_kernels"], (2, cfg.k_mg))
    regions = nm.transpose(nm.reshape(merged, (n, cfg.l_r, cfg.n_r)))
    info = nm.reshape(nm.matmul(cond, state["cms.w_info"]), (n, cfg.n_r, cfg.l_r))
    r = nm.add(regions, info)
    local = nm.matmul(nm.act(nm.matmul(r, state["cms.w_r1"]), cfg.hidden_act), state["cms.w_r2"])
    r1 = nm.add(local, r)
    crossed = nm.matmul(nm.act(nm.matmul(nm.transpose(r1), state["cms.w_r3"]), cfg.hidden_act),
                        state["cms.w_r4"])
    return nm.add(nm.transpose(crossed), r1)


def _align_direction(query: Tensor, keyval: Tensor, state: ModelState, cfg: ModelConfig,
                     layer: int, collect: list | None) -> Tensor:
    """One direction of one alignment layer: query regions attend over keyval."""
    base = f"hom.layer{layer}.attn"
    inv_sqrt_da = 1.0 / math.sqrt(cfg.d_a)
    heads = []
    for head in range(cfg.n_h):
        q = nm.matmul(query, state[f"{base}.head{head}.w_q"])
        k = nm.matmul(keyval, state[f"{base}.head{head}.w_k"])
        v = nm.matmul(keyval, state[f"{base}.head{head}.w_v"])
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), inv_sqrt_da)
        if cfg.attn_norm == "softmax":
            weights = nm.softmax_rows(scores)
        else:
            denom = nm.clamp_away_from_zero(
                nm.tensor_sum(scores, axis=-1, keepdims=True), RAW_NORM_FLOOR)
            weights = nm.div(scores, denom)
        if collect is not None:
            collect.append(weights.data)
        heads.append(nm.matmul(weights, v))
    aligned = nm.matmul(nm.concat(heads, axis=-1), state[f"{base}.w_head"])
    return nm.matmul(nm.add(query, aligned), state[f"{base}.w_diff"])


def _hom_batch(ra: Tensor, rb: Tensor, state: ModelState, cfg: ModelConfig,
               collect: list | None = None) -> Tensor:
    """(N, n_r, l_r) region maps of both homologues -> (N, l_h) differences."""
    for layer in range(cfg.hom_layers):
        ra, rb = (_align_direction(ra, rb, state, cfg, layer, collect),
                  _align_direction(rb, ra, state, cfg, layer, collect))
    flat = nm.concat([nm.flatten(ra), nm.flatten(rb)], axis=-1)
    return nm.act(nm.add(nm.matmul(flat, state["hom.w_hom"]), state["hom.b_hom"]),
                  cfg.hidden_act)


def _bag_batch(diffs: Tensor, state: ModelState) -> tuple[Tensor, Tensor]:
    """(B, m, l_h) pair differences -> ((B, 1) probabilities, (B, m, 1) weights)."""
    hidden = nm.relu(nm.add(nm.matmul(diffs, state["bag.mlp.w1"]), state["bag.mlp.b1"]))
    alphas = nm.sigmoid(nm.add(nm.matmul(hidden, state["bag.mlp.w2"]), state["bag.mlp.b2"]))
    pooled = nm.tensor_sum(nm.mul(alphas, diffs), axis=1)
    y_hat = nm.sigmoid(nm.add(nm.matmul(pooled, state["bag.w_bag"]), state["bag.b_bag"]))
    return y_hat, alphas


def forward_bags(a_seqs: np.ndarray, b_seqs: np.ndarray, conds: np.ndarray,
                 state: ModelState, cfg: ModelConfig,
                 collect: list | None = None) -> tuple[Tensor, Tensor]:
    """Run full bags through the network.

    a_seqs/b_seqs: (B, m, 2, d) arrays; conds: (B, 28). Returns the (B, 1)
    probability tensor and the (B, m, 1) aggregation weights.
    """
    bsz, m = a_seqs.shape[0], a_seqs.shape[1]
    if a_seqs.shape != b_seqs.shape or a_seqs.shape[2:] != (2, cfg.d):
        raise ShapeMismatch(f"bag arrays {a_seqs.shape}/{b_seqs.shape} do not match d={cfg.d}")
    dtype = state.dtype
    cond_rep = np.repeat(np.asarray(conds, dtype=dtype), m, axis=0)
    xa = Tensor(np.ascontiguousarray(a_seqs, dtype=dtype).reshape(bsz * m, 1, 2, cfg.d))
    xb = Tensor(np.ascontiguousarray(b_seqs, dtype=dtype).reshape(bsz * m, 1, 2, cfg.d))
    cond_t = Tensor(cond_rep)
    ra = _cms_batch(xa, cond_t, state, cfg)
    rb = _cms_batch(xb, cond_t, state, cfg)
    diffs = nm.reshape(_hom_batch(ra, rb, state, cfg, collect), (bsz, m, cfg.l_h))
    return _bag_batch(diffs, state)


def batch_bce(y_hat: Tensor, labels: np.ndarray) -> Tensor:
    """Mean clamped binary cross-entropy over a (B, 1) probability tensor."""
    y = Tensor(np.asarray(labels, dtype=y_hat.data.dtype).reshape(y_hat.data.shape))
    p = nm.clamp(y_hat, PROB_EPS, 1.0 - PROB_EPS)
    log_likelihood = nm.add(nm.mul(y, nm.log(p)), nm.mul(nm.sub(1.0, y), nm.log(nm.sub(1.0, p))))
    return nm.neg(nm.mean(log_likelihood))


def bag_loss(a_seqs, b_seqs, conds, labels, state: ModelState, cfg: ModelConfig) -> Tensor:
    y_hat, _ = forward_bags(a_seqs, b_seqs, conds, state, cfg)
    return batch_bce(y_hat, labels)


# ---------------------------------------------------------------------------
# per-record interfaces

def _seq_array(seq: ChromosomeSequence, cfg: ModelConfig) -> np.ndarray:
    if seq.values.shape != (2, cfg.d):
        raise ShapeMismatch(f"sequence shape {seq.values.shape} != (2, {cfg.d})")
    return seq.values


def cms_forward(seq: ChromosomeSequence, cond: ConditionEncoding,
                state: ModelState, cfg: ModelConfig) -> np.ndarray:
    """Region features (n_r, l_r) for one chromosome."""
    x = _seq_array(seq, cfg)[None, None, :, :].astype(state.dtype)
    c = cond.concat()[None, :].astype(state.dtype)
    with nm.no_grad():
        out = _cms_batch(Tensor(x), Tensor(c), state, cfg)
    return out.data[0]


def hom_align(ra: np.ndarray, rb: np.ndarray, state: ModelState, cfg: ModelConfig,
              collect: list | None = None) -> np.ndarray:
    """Pair-difference vector (l_h,) from two (n_r, l_r) region maps."""
    ra = np.asarray(ra, dtype=state.dtype)
    rb = np.asarray(rb, dtype=state.dtype)
    if ra.shape != (cfg.n_r, cfg.l_r) or rb.shape != (cfg.n_r, cfg.l_r):
        raise ShapeMismatch(f"expected ({cfg.n_r}, {cfg.l_r}) region maps, "
                            f"got {ra.shape} and {rb.shape}")
    with nm.no_grad():
        out = _hom_batch(Tensor(ra[None]), Tensor(rb[None]), state, cfg, collect)
    return out.data[0]


def bag_forward(diffs, state: ModelState) -> Prediction:
    """Aggregate m pair-difference vectors into one prediction."""
    arr = np.asarray(diffs, dtype=state.dtype)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise EmptyBag(f"expected (m, l_h) with m >= 1, got {arr.shape}")
    with nm.no_grad():
        y_hat, alphas = _bag_batch(Tensor(arr[None]), state)
    return _prediction(y_hat.data[0, 0], alphas.data[0, :, 0])


def bce_loss(y_hat: float, y: int) -> float:
    """Clamped binary cross-entropy for a single probability."""
    if y not in (0, 1):
        raise InvariantViolation(f"label {y} not in {{0, 1}}")
    p = min(max(float(y_hat), PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def _prediction(y_hat: float, alphas: np.ndarray) -> Prediction:
    # float32 sigmoids can saturate to exactly 0/1; keep probabilities open
    return Prediction(
        y_hat=float(np.clip(y_hat, PROB_EPS, 1.0 - PROB_EPS)),
        alphas=np.clip(alphas, PROB_EPS, 1.0 - PROB_EPS),
    )


def records_to_arrays(records, cfg: ModelConfig):
    """Stack equally sized bags into (B, m, 2, d) arrays plus conditions/labels."""
    if not records:
        raise EmptyBag("no records")
    m = records[0].m
    for rec in records:
        if rec.m != m:
            raise InvariantViolation(f"record {rec.record_id}: m={rec.m} != {m}")
        if rec.d != cfg.d:
            raise InvariantViolation(f"record {rec.record_id}: d={rec.d} != config d={cfg.d}")
    bsz = len(records)
    a = np.empty((bsz, m, 2, cfg.d), dtype=np.float32)
    b = np.empty((bsz, m, 2, cfg.d), dtype=np.float32)
    conds = np.empty((bsz, COND_LEN), dtype=np.float64)
    labels = np.empty(bsz, dtype=np.float64)
    for i, rec in enumerate(records):
        for j, pair in enumerate(rec.pairs):
            a[i, j] = pair.a.values
            b[i, j] = pair.b.values
        conds[i] = encode_condition(rec.chrom_type, rec.band_level).concat()
        labels[i] = rec.label
    return a, b, conds, labels


def predict_bags(records, state: ModelState, cfg: ModelConfig,
                 batch_size: int = 256) -> list[Prediction]:
    """Pure batched inference; bags of mixed sizes are grouped by m."""
    order: dict[int, list[int]] = {}
    for idx, rec in enumerate(records):
        order.setdefault(rec.m, []).append(idx)
    results: list[Prediction | None] = [None] * len(records)
    for indices in order.values():
        for start in range(0, len(indices), batch_size):
            chunk = [records[i] for i in indices[start:start + batch_size]]
            a, b, conds, _ = records_to_arrays(chunk, cfg)
            with nm.no_grad():
                y_hat, alphas = forward_bags(a, b, conds, state, cfg)
            for k, rec_idx in enumerate(indices[start:start + batch_size]):
                results[rec_idx] = _prediction(y_hat.data[k, 0], alphas.data[k, :, 0])
    return results


def predict_bag(record: BagRecord, state: ModelState, cfg: ModelConfig) -> Prediction:
    return predict_bags([record], state, cfg)[0]


def gradcheck_model(cfg: ModelConfig, seed: int = 0, h: float = 1e-5, tol: float = 1e-4):
    """Finite-difference check of the full loss gradient w.r.t. every parameter.

    Runs on two random m-pair bags (one per label) so both cross-entropy
    branches carry gradient. Returns the numerics GradCheckReport.
    """
    rng = np.random.default_rng(seed)
    state = init_params(cfg, seed)
    bsz = 2
    a = rng.random((bsz, cfg.m, 2, cfg.d))
    b = rng.random((bsz, cfg.m, 2, cfg.d))
    conds = np.zeros((bsz, COND_LEN))
    for i in range(bsz):
        conds[i, rng.integers(0, 24)] = 1.0
        conds[i, 24 + rng.integers(0, 4)] = 1.0
    labels = np.array([0.0, 1.0])

    def f():
        return bag_loss(a, b, conds, labels, state, cfg)

    return nm.grad_check(f, state.tensors, h=h, tol=tol)
