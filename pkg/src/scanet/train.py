"""Adam training loop, confusion-matrix evaluation and checkpoint files."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archspec as A
from .data import AugmentConfig, ImageSource, make_batches
from .layers import Context
from .tensor import Tape, Tensor, backward, softmax_cross_entropy

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    rebalance: bool = True
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def create(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads: Sequence[np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params[i].data`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)
        p.data -= step.astype(p.data.dtype)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @classmethod
    def from_predictions(cls, labels, preds) -> "ConfusionMatrix":
        y = np.asarray(labels).astype(bool)
        p = np.asarray(preds).astype(bool)
        return cls(int((y & p).sum()), int((y & ~p).sum()), int((~y & p).sum()),
                   int((~y & ~p).sum()))


@dataclass
class MetricsReport:
    accuracy: Optional[float]
    sensitivity: Optional[float]
    ppv: Optional[float]
    specificity: Optional[float] = None

    @staticmethod
    def pct(v: Optional[float]) -> str:
        return "n/a" if v is None else f"{100 * v:.1f}"

    def line(self) -> str:
        return (f"Accuracy {self.pct(self.accuracy)} / Sensitivity {self.pct(self.sensitivity)}"
                f" / PPV {self.pct(self.ppv)}")


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, sensitivity and PPV with malignant as the positive class."""
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")

    def ratio(a, b):
        return a / b if b > 0 else None

    return MetricsReport(ratio(cm.tp + cm.tn, cm.total), ratio(cm.tp, cm.tp + cm.fn),
                         ratio(cm.tp, cm.tp + cm.fp), ratio(cm.tn, cm.tn + cm.fp))


def predict(network: A.Network, source: ImageSource, chunk: int = 64) -> np.ndarray:
    """Argmax class per sample; equal logits resolve to the lower index (benign)."""
    preds = []
    for start in range(0, len(source), chunk):
        imgs = np.stack([source.load(i) for i in range(start, min(start + chunk, len(source)))])
        preds.append(np.argmax(network.predict_logits(imgs, chunk), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(network: A.Network, source: ImageSource) -> ConfusionMatrix:
    if len(source) == 0:
        raise ValueError("empty test set")
    return ConfusionMatrix.from_predictions(source.labels, predict(network, source) == 1)


def accuracy(network: A.Network, source: ImageSource) -> float:
    return float((predict(network, source) == np.asarray(source.labels)).mean())


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"SCANCKPT"
VERSION = 1


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: Optional[float]  # None without a validation split


@dataclass
class Checkpoint:
    spec_text: str
    params: list  # [(name, ndarray)]
    buffers: list = field(default_factory=list)
    adam_t: int = 0
    adam_m: list = field(default_factory=list)
    adam_v: list = field(default_factory=list)
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def capture(cls, network: A.Network, state: Optional[AdamState] = None, epoch: int = 0,
                history: Sequence[EpochRecord] = ()) -> "Checkpoint":
        return cls(A.serialize_archspec(network.spec),
                   [(p.name, p.data.copy()) for p in network.params()],
                   [(n, b.copy()) for n, b in network.buffers()],
                   state.t if state else 0,
                   [m.copy() for m in state.m] if state else [],
                   [v.copy() for v in state.v] if state else [],
                   epoch, list(history))

    def save(self, path) -> None:
        groups = [("param", self.params), ("buffer", self.buffers),
                  ("adam_m", list(zip((n for n, _ in self.params), self.adam_m))),
                  ("adam_v", list(zip((n for n, _ in self.params), self.adam_v)))]
        entries, blobs = [], []
        for group, items in groups:
            for name, arr in items:
                entries.append({"group": group, "name": name, "shape": list(arr.shape)})
                blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        header = json.dumps({
            "spec": self.spec_text, "epoch": self.epoch, "adam_t": self.adam_t,
            "history": [asdict(h) for h in self.history], "tensors": entries,
        }).encode("utf-8")
        with Path(path).open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:len(MAGIC)] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = len(MAGIC) + struct.calcsize("<IQ")
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        out = {"param": [], "buffer": [], "adam_m": [], "adam_v": []}
        for e in header["tensors"]:
            n = math.prod(e["shape"])
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(e["shape"])
            pos += 4 * n
            out[e["group"]].append((e["name"], arr.astype(np.float32)))
        return cls(header["spec"], out["param"], out["buffer"], header["adam_t"],
                   [a for _, a in out["adam_m"]], [a for _, a in out["adam_v"]],
                   header["epoch"], [EpochRecord(**h) for h in header["history"]])

    def network(self) -> A.Network:
        net = A.build_network(A.parse_archspec(self.spec_text))
        apply_state(net, self.params, self.buffers)
        return net


def apply_state(net: A.Network, params, buffers=()) -> None:
    ps = net.params()
    if [p.name for p in ps] != [n for n, _ in params]:
        raise ValueError("checkpoint parameters do not match the architecture")
    for p, (_, arr) in zip(ps, params):
        p.data = np.array(arr, dtype=np.float32)
    bufs = dict(net.buffers())
    for name, arr in buffers:
        bufs[name][...] = arr


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_accuracy"])
        for h in history:
            w.writerow([h.epoch, repr(h.loss), "" if h.val_accuracy is None else repr(h.val_accuracy)])


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation epoch (initial weights when epochs == 0)
    history: list
    steps: int
    final: Checkpoint
    step_losses: list = field(default_factory=list)


def train(network: A.Network, train_source: ImageSource, val_source: Optional[ImageSource],
          cfg: TrainConfig, augment_cfg: Optional[AugmentConfig] = None) -> TrainResult:
    """Adam over rebalanced batches; keeps the best-validation checkpoint.

    ``cfg.max_steps`` stops early after that many optimizer steps (desk-scale
    proxy runs). Without a validation source the last epoch is kept.
    """
    params = network.params()
    dtype = params[0].data.dtype
    state = AdamState.create(params)
    history: list[EpochRecord] = []
    step_losses: list[float] = []
    best = Checkpoint.capture(network, state, 0, history)
    best_acc = -math.inf
    steps = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for batch in make_batches(train_source, cfg.batch_size, cfg.rebalance, rng, augment_cfg):
            tape = Tape()
            logits = network.forward(Tensor(batch.images.astype(dtype, copy=False)),
                                     Context(tape, train=True))
            loss, _ = softmax_cross_entropy(logits, batch.labels)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {steps + 1}")
            grads = backward(loss, tape)
            g = []
            for p in params:
                gid = tape.grad_id_of(p)
                g.append(np.zeros_like(p.data) if gid is None else grads[gid].astype(dtype, copy=False))
            adam_step(params, g, state, cfg)
            losses.append(value)
            step_losses.append(value)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        val_acc = accuracy(network, val_source) if val_source is not None else None
        history.append(EpochRecord(epoch + 1, float(np.mean(losses)), val_acc))
        logger.info("epoch %d loss %.4f val_acc %s", epoch + 1, history[-1].loss, val_acc)
        score = val_acc if val_source is not None else epoch
        if score > best_acc:
            best_acc = score
            best = Checkpoint.capture(network, state, epoch + 1, history)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    final = Checkpoint.capture(network, state, len(history), history)
    best.history = list(history)
    return TrainResult(best, history, steps, final, step_losses)
