"""Cox partial-likelihood loss and the training loop.

The loss uses Breslow tie handling with risk sets formed inside each
minibatch, normalised by the batch event count. Optimisation is AdamW
(decoupled weight decay) under a cosine learning-rate schedule; every
random draw comes from named substreams of the run seed, so training is
bit-reproducible given (cohort, config).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .errors import BadMagic, NoEvents, ShapeOverflow
from .model import (
    ModelDims,
    ModelParams,
    PreparedCohort,
    canonical_modalities,
    flatten_params,
    forward_risks,
    init_params,
    param_spec,
    unflatten_params,
    unflatten_tensors,
)
from .numerics import Tensor
from .rng import substream


@dataclass
class SurvivalRecord:
    patient_id: str
    time: float
    event: int  # 1 observed, 0 censored

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"negative follow-up time for {self.patient_id}")
        if self.event not in (0, 1):
            raise ValueError(f"event flag must be 0 or 1, got {self.event}")


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    schedule: str = "cosine"
    seed: int = 0
    fusion_mode: str = "full"
    modalities: str = "pht"
    n_histology: int = 16
    n_pathways: int = 50
    text_proto_mode: str = "average"
    d_e: int = 256
    d_r: int = 32
    shared_beta_mlp: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive, weight_decay nonnegative")
        if self.schedule != "cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.fusion_mode not in ("full", "late", "hierarchical"):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        self.modalities = canonical_modalities(self.modalities)


@dataclass
class EpochStats:
    epoch: int
    learning_rate: float
    mean_loss: float


def _records_to_arrays(records):
    times = np.asarray([r.time for r in records], dtype=float)
    events = np.asarray([r.event for r in records], dtype=int)
    return times, events


def cox_loss(risks, records):
    """Negative log partial likelihood (Breslow ties), averaged over events.

    ``records`` may be SurvivalRecords or a (times, events) pair. Returns
    (loss, degenerate): with zero events in the batch the loss is 0 and the
    degenerate flag is set. Tensor risks give a Tensor loss.
    """
    if isinstance(records, tuple):
        times, events = np.asarray(records[0], dtype=float), np.asarray(records[1], dtype=int)
    else:
        times, events = _records_to_arrays(records)
    n = times.shape[0]
    event_idx = np.flatnonzero(events == 1)
    n_events = event_idx.size
    graph = isinstance(risks, Tensor)
    if n_events == 0:
        return (Tensor(0.0) if graph else 0.0), True

    # risk set of event i: everyone still under observation at that time
    at_risk = (times[None, :] >= times[event_idx, None]).astype(float)
    if graph:
        eta = nm.reshape(risks, (n,))
        observed = nm.gather_rows(nm.reshape(eta, (n, 1)), event_idx)
        pooled = nm.masked_logsumexp(nm.broadcast_to(nm.reshape(eta, (1, n)), (n_events, n)), at_risk)
        loss = (nm.tsum(pooled) - nm.tsum(observed)) * (1.0 / n_events)
        return loss, False
    eta = np.asarray(risks, dtype=float).reshape(n)
    shifted = np.where(at_risk > 0.5, eta[None, :], -np.inf)
    row_max = shifted.max(axis=1)
    pooled = row_max + np.log(np.exp(shifted - row_max[:, None]).sum(axis=1))
    return float((pooled.sum() - eta[event_idx].sum()) / n_events), False


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    """Decay from ``base`` at epoch 0 towards 0 across the epoch range."""
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def train(prepared: PreparedCohort, config: TrainConfig) -> tuple[ModelParams, list[EpochStats]]:
    """Minibatch Cox training; deterministic given (cohort, config)."""
    n = len(prepared)
    if n == 0:
        raise NoEvents("empty cohort")
    if int(prepared.events.sum()) == 0:
        raise NoEvents("cohort has no observed events")
    dims = prepared.dims
    if dims.modalities != config.modalities:
        raise ValueError(
            f"cohort prepared for modalities {dims.modalities!r} but config asks {config.modalities!r}"
        )
    spec = param_spec(dims)
    flat = flatten_params(init_params(dims, substream(config.seed, "init")), spec)

    moment1 = np.zeros_like(flat)
    moment2 = np.zeros_like(flat)
    step = 0
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = cosine_lr(config.learning_rate, epoch, config.epochs)
        order = substream(config.seed, "shuffle", epoch).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = prepared.subset(order[start : start + config.batch_size])
            leaf = Tensor(flat, requires_grad=True)
            risks = forward_risks(batch, unflatten_tensors(leaf, spec), dims, config.fusion_mode)
            loss, degenerate = cox_loss(risks, (batch.times, batch.events))
            if degenerate:
                losses.append(0.0)
                continue
            loss.backward()
            grad = leaf.grad
            step += 1
            moment1 = beta1 * moment1 + (1.0 - beta1) * grad
            moment2 = beta2 * moment2 + (1.0 - beta2) * grad * grad
            m_hat = moment1 / (1.0 - beta1**step)
            v_hat = moment2 / (1.0 - beta2**step)
            flat = flat - lr * (m_hat / (np.sqrt(v_hat) + adam_eps) + config.weight_decay * flat)
            losses.append(float(loss.data))
        history.append(EpochStats(epoch, lr, float(np.mean(losses))))
    values = {name: arr.copy() for name, arr in unflatten_params(flat, spec).items()}
    return ModelParams(values, dims), history


def predict_cohort(model: ModelParams, prepared: PreparedCohort, fusion_mode: str = "full") -> np.ndarray:
    """Deterministic risk scores for every prepared patient."""
    risks = forward_risks(prepared, model.values, model.dims, fusion_mode)
    return np.asarray(risks.data)


def predict(model: ModelParams, patient: PreparedCohort, fusion_mode: str = "full") -> float:
    """Risk score for a single prepared patient."""
    if len(patient) != 1:
        raise ValueError("predict expects exactly one prepared patient")
    return float(predict_cohort(model, patient, fusion_mode)[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PS3C"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ModelParams, config: TrainConfig, fingerprint: str = "") -> None:
    """Versioned binary container: named float32 little-endian tensors plus
    the full training config, model dims and gene/pathway fingerprint."""
    spec = model.spec
    header = {
        "config": asdict(config),
        "dims": {**asdict(model.dims), "pathway_widths": list(model.dims.pathway_widths)},
        "fingerprint": fingerprint,
        "tensors": [{"name": name, "shape": list(shape)} for name, shape in spec],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name, _ in spec:
            fh.write(np.ascontiguousarray(model.values[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig, str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 9 or raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<BI", raw[4:9])
    if version != CHECKPOINT_VERSION:
        raise BadMagic(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 9 + header_len:
        raise ShapeOverflow(f"{path}: truncated checkpoint header")
    header = json.loads(raw[9 : 9 + header_len].decode())
    dims_dict = dict(header["dims"])
    dims_dict["pathway_widths"] = tuple(dims_dict["pathway_widths"])
    dims = ModelDims(**dims_dict)
    config = TrainConfig(**header["config"])
    values: dict[str, np.ndarray] = {}
    offset = 9 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        if offset + size > len(raw):
            raise ShapeOverflow(f"{path}: tensor {entry['name']} overruns the file")
        values[entry["name"]] = (
            np.frombuffer(raw[offset : offset + size], dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset += size
    if offset != len(raw):
        raise ShapeOverflow(f"{path}: {len(raw) - offset} trailing bytes")
    return ModelParams(values, dims), config, header["fingerprint"]
