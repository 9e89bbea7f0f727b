"""Mini-batch training with early stopping, evaluation, and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import zipfile
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import bce_logits_grad, fake_probability
from .data import DatasetSplit
from .encoders import NewsItem
from .metrics import MetricsReport, metrics_report
from .model import MMFN, Dims, make_variant
from .nn import Parameter

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    lr_head: float = 1e-3
    lr_encoder: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    freeze_text_encoder: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be at least 1")
        if self.lr_head < 0 or self.lr_encoder < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> TrainConfig:
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(
        self,
        groups: dict[str, tuple[list[tuple[str, Parameter]], float]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.value) for params, _ in groups.values() for n, p in params}
        self.v = {n: np.zeros_like(p.value) for params, _ in groups.values() for n, p in params}

    def step(self) -> None:
        self.step_count += 1
        b1, b2, t = self.beta1, self.beta2, self.step_count
        for params, lr in self.groups.values():
            for name, p in params:
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


def parameter_groups(model: MMFN, cfg: TrainConfig) -> dict[str, tuple[list[tuple[str, Parameter]], float]]:
    """Encoder-tuning parameters at ``lr_encoder``; everything else at ``lr_head``."""
    enc = model.encoder_parameters()
    frozen_ids = {id(p) for p in enc["text"]} if cfg.freeze_text_encoder else set()
    encoder_ids = {id(p) for ps in enc.values() for p in ps}
    encoder, head = [], []
    for name, p in model.named_parameters():
        if id(p) in frozen_ids:
            continue
        (encoder if id(p) in encoder_ids else head).append((name, p))
    return {"encoder": (encoder, cfg.lr_encoder), "head": (head, cfg.lr_head)}


def predict_proba(model: MMFN, data: DatasetSplit, items: Sequence[NewsItem], batch_size: int = 64) -> np.ndarray:
    """Fake probabilities in evaluation mode; restores the previous mode."""
    was_training = model.training
    model.eval()
    try:
        probs = [
            fake_probability(model(data.batch(items[i : i + batch_size])))
            for i in range(0, len(items), batch_size)
        ]
    finally:
        model.train(was_training)
    return np.concatenate(probs) if probs else np.zeros(0)


def evaluate(model: MMFN, data: DatasetSplit, items: Sequence[NewsItem] | None = None, threshold: float = 0.5) -> MetricsReport:
    """Score the test split (or ``items``); p_fake >= threshold means fake."""
    items = data.test if items is None else items
    if not items:
        raise ValueError("cannot evaluate an empty split")
    p = predict_proba(model, data, items)
    return metrics_report([i.label for i in items], (p >= threshold).astype(int))


@dataclass
class TrainResult:
    model: MMFN
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    optimizer: Adam | None = None
    rng: np.random.Generator | None = None


def _accuracy_and_loss(model, data, items) -> tuple[float, float]:
    p = predict_proba(model, data, items)
    y = np.array([i.label for i in items])
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    loss = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log(1 - pc))))
    return float(np.mean((p >= 0.5) == y)), loss


def train(model: MMFN, data: DatasetSplit, cfg: TrainConfig) -> TrainResult:
    """Adam training with early stopping on validation accuracy.

    An epoch counts as an improvement when validation accuracy rises, or
    stays equal while validation loss falls. The best epoch's weights are
    restored before returning. Without a validation split the last epoch is
    kept.
    """
    if not data.train:
        raise ValueError("training split is empty")
    rng = np.random.default_rng([cfg.seed, 7])
    opt = Adam(parameter_groups(model, cfg), cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(model, optimizer=opt, rng=rng)
    best_key: tuple[float, float] | None = None
    best_state = None
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(data.train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            items = [data.train[k] for k in order[start : start + cfg.batch_size]]
            batch = data.batch(items)
            model.zero_grad()
            logits, cache = model.forward(batch)
            loss, grad = bce_logits_grad(logits, batch.labels)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"loss became {loss} at epoch {epoch}, batch starting at {start} "
                    f"(ids {[i.id for i in items[:3]]}...)"
                )
            model.backward(grad, cache)
            opt.step()
            losses.append(loss * len(items))

        record = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(order))}
        record["train_acc"], _ = _accuracy_and_loss(model, data, data.train)
        if data.val:
            record["val_acc"], record["val_loss"] = _accuracy_and_loss(model, data, data.val)
        result.history.append(record)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if k != "epoch"})

        if not data.val:
            result.best_epoch = epoch
            continue
        key = (record["val_acc"], -record["val_loss"])
        if best_key is None or key > best_key:
            best_key, best_state, stale = key, model.state_dict(), 0
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_EPOCH_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a, dtype="<f4"), allow_pickle=False)
    return buf.getvalue()


def _put(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(
    path: str | Path,
    model: MMFN,
    config: dict,
    optimizer: Adam | None = None,
    epoch: int = 0,
    rng: np.random.Generator | None = None,
) -> None:
    """Single zip archive; tensors stored as little-endian float32 ``.npy``.

    Entry timestamps are fixed, so identical inputs give identical bytes.
    """
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "config.json", json.dumps(config, sort_keys=True, indent=2).encode())
        meta = {
            "epoch": epoch,
            "rng_state": rng.bit_generator.state if rng is not None else None,
            "optimizer_step": optimizer.step_count if optimizer is not None else 0,
            "format": 1,
        }
        _put(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=2).encode())
        for name, value in model.state_dict().items():
            _put(zf, f"model/{name}.npy", _npy_bytes(value))
        if optimizer is not None:
            for name in sorted(optimizer.m):
                _put(zf, f"optimizer/m/{name}.npy", _npy_bytes(optimizer.m[name]))
                _put(zf, f"optimizer/v/{name}.npy", _npy_bytes(optimizer.v[name]))


@dataclass
class Checkpoint:
    config: dict
    meta: dict
    state: dict[str, np.ndarray]
    optimizer_m: dict[str, np.ndarray]
    optimizer_v: dict[str, np.ndarray]


def load_checkpoint(path: str | Path) -> Checkpoint:
    def arrays(zf, prefix):
        out = {}
        for name in zf.namelist():
            if name.startswith(prefix) and name.endswith(".npy"):
                out[name[len(prefix) : -4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
        return out

    with zipfile.ZipFile(path) as zf:
        return Checkpoint(
            config=json.loads(zf.read("config.json")),
            meta=json.loads(zf.read("meta.json")),
            state=arrays(zf, "model/"),
            optimizer_m=arrays(zf, "optimizer/m/"),
            optimizer_v=arrays(zf, "optimizer/v/"),
        )


def model_from_checkpoint(ckpt: Checkpoint) -> MMFN:
    cfg = ckpt.config
    _, model = make_variant(
        cfg["variant"],
        Dims(**cfg["dims"]),
        seed=cfg.get("seed", 0),
        remap_similarity=cfg.get("remap_similarity", False),
    )
    model.load_state_dict(ckpt.state)
    model.eval()
    return model


def history_dict(result: TrainResult) -> dict:
    return {"best_epoch": result.best_epoch, "epochs": result.history}


def config_echo(**parts) -> dict:
    """JSON-safe copy of run settings (dataclasses are flattened)."""
    out = {}
    for k, v in parts.items():
        out[k] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
    return json.loads(json.dumps(out))
