"""Knowledge distillation of the reduced network.

The objective per sample is

    lambda * T^2 * KL(p(y_t, T) || p(y_s, T)) + (1 - lambda) * CE(onehot, p(y_s, 1))

with ``T = tau`` and ``p(y, T) = softmax(y / T)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParameterError, ShapeError, TrainingDivergedError
from .heads import FnnHead, PceModel, head_storage_bytes, load_head, save_head
from .nn import Network, load_model, save_model, storage_bytes
from .nn.train import SGD, log_softmax, network_params
from .reducers import ProjectionMap

log = logging.getLogger(__name__)


# losses ------------------------------------------------------------------

def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")


def softmax_t(logits, T: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / T`` along the last axis."""
    _check_temperature(T)
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_distill_loss(y_t, y_s, T: float) -> float | np.ndarray:
    """``T^2 * sum_j p_j(y_t, T) log(p_j(y_t, T) / p_j(y_s, T))``; per row for 2-D input."""
    _check_temperature(T)
    y_t = np.asarray(y_t, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.float64)
    if y_t.shape != y_s.shape:
        raise ShapeError(f"teacher logits {y_t.shape} and student logits {y_s.shape} differ in shape")
    log_pt = log_softmax(y_t / T)
    log_ps = log_softmax(y_s / T)
    kl = (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=-1)
    return T * T * np.maximum(kl, 0.0)


def _onehot_class(truth: np.ndarray) -> np.ndarray:
    ones = truth == 1.0
    if not np.all(ones | (truth == 0.0)) or not np.all(ones.sum(axis=-1) == 1):
        raise DataError("ground truth must be one-hot: exactly one entry 1, all others 0")
    return ones.argmax(axis=-1)


def ce_student_loss(truth_onehot, y_s) -> float | np.ndarray:
    """``-log p_c(y_s, T=1)`` for the true class ``c``."""
    truth = np.asarray(truth_onehot, dtype=np.float64)
    y_s = np.asarray(y_s, dtype=np.float64)
    if truth.shape != y_s.shape:
        raise ShapeError(f"one-hot truth {truth.shape} and logits {y_s.shape} differ in shape")
    c = _onehot_class(truth)
    logp = log_softmax(y_s)
    return -np.take_along_axis(logp, np.asarray(c)[..., None], axis=-1)[..., 0]


def combined_loss(truth, y_t, y_s, cfg: "DistillConfig") -> float | np.ndarray:
    return cfg.lam * kl_distill_loss(y_t, y_s, cfg.tau) + (1.0 - cfg.lam) * ce_student_loss(truth, y_s)


def distill_objective(y_t: np.ndarray, y_s: np.ndarray, labels: np.ndarray, tau: float, lam: float):
    """Batch mean of the combined loss, its two parts, and the gradient w.r.t. ``y_s``.

    Returns ``(loss, l_d, l_s, grad)``.
    """
    n = len(labels)
    rows = np.arange(n)
    log_pt = log_softmax(y_t / tau)
    log_ps = log_softmax(y_s / tau)
    p_t = np.exp(log_pt)
    l_d = tau * tau * np.maximum((p_t * (log_pt - log_ps)).sum(axis=1), 0.0)
    log_p1 = log_softmax(y_s)
    l_s = -log_p1[rows, labels]
    # d/dy_s of T^2 KL = T (p_s(T) - p_t(T)); of CE = p_s(1) - onehot
    g_s = np.exp(log_p1)
    g_s[rows, labels] -= 1.0
    grad = lam * tau * (np.exp(log_ps) - p_t) + (1.0 - lam) * g_s
    l_d_mean, l_s_mean = l_d.mean(), l_s.mean()
    return lam * l_d_mean + (1.0 - lam) * l_s_mean, l_d_mean, l_s_mean, grad / n


# configuration and the student -----------------------------------------------

@dataclass
class DistillConfig:
    tau: float = 4.0
    lam: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    train_head: bool = True
    train_projection: bool = False
    train_pre: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError(f"need epochs >= 0 and batch size >= 1, got {self.epochs}, {self.batch_size}")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"need lr >= 0 and momentum in [0, 1), got {self.lr}, {self.momentum}")


@dataclass
class ReducedNet:
    """Pre-model, projection to ``r`` coordinates, and an input-output head."""

    pre: Network
    map: ProjectionMap
    head: PceModel | FnnHead

    def __post_init__(self):
        n_l = int(np.prod(self.pre.output_shape))
        if self.map.n_features != n_l:
            raise ShapeError(f"pre-model emits {n_l} features, projection expects {self.map.n_features}")
        if self.head.r != self.map.r:
            raise ShapeError(f"projection has rank {self.map.r}, head expects {self.head.r} inputs")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.pre.input_shape

    @property
    def n_out(self) -> int:
        return self.head.n_out

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.pre(x).reshape(len(x), -1)

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return self.map.project_batch(self.features(x))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return self(x[None])[0]
        return self.head(self.reduce(x))

    def storage(self) -> dict[str, int]:
        return {"pre_model_bytes": storage_bytes(self.pre),
                "projection_bytes": self.map.storage_bytes(),
                "head_bytes": head_storage_bytes(self.head)}

    def save(self, directory) -> None:
        directory = Path(directory)
        save_model(self.pre, directory / "pre.json")
        self.map.save(directory / "projection.json")
        save_head(self.head, directory / "head.json")

    @classmethod
    def load(cls, directory) -> "ReducedNet":
        directory = Path(directory)
        return cls(load_model(directory / "pre.json"), ProjectionMap.load(directory / "projection.json"),
                   load_head(directory / "head.json"))


ARTIFACT_FILES = ("pre.json", "projection.json", "head.json")


# training ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    l_d: float
    l_s: float
    train_acc: float
    test_acc: float | None = None

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "loss": self.loss, "l_d": self.l_d, "l_s": self.l_s,
                "train_acc": self.train_acc, "test_acc": self.test_acc}


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_jsonl(self) -> str:
        import json
        return "".join(json.dumps(r.as_dict()) + "\n" for r in self.records)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_reduced(student: ReducedNet, teacher: Network, x: np.ndarray, labels: np.ndarray,
                  cfg: DistillConfig, test: tuple[np.ndarray, np.ndarray] | None = None,
                  teacher_logits: np.ndarray | None = None) -> tuple[ReducedNet, History]:
    """Mini-batch SGD on the combined loss; updates ``student`` in place.

    Only the parts enabled in ``cfg`` are trained; the teacher is evaluated
    once (or its logits are passed in). History entry 0 is the state before
    any update; entry ``e`` is measured over the whole training set after
    epoch ``e``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_class = int(np.prod(teacher.output_shape))
    if student.n_out != n_class:
        raise ConfigError(f"student emits {student.n_out} logits, teacher {n_class}")
    if len(labels) and (labels.min() < 0 or labels.max() >= n_class):
        raise DataError(f"labels must lie in [0, {n_class})")
    y_t = teacher(x) if teacher_logits is None else teacher_logits

    trainables: list[np.ndarray] = []
    if cfg.train_head:
        trainables += student.head.trainable()
    if cfg.train_projection:
        trainables.append(student.map.basis)
    if cfg.train_pre:
        trainables += network_params(student.pre)
    frozen_front = not (cfg.train_projection or cfg.train_pre)
    cached_z = student.reduce(x) if frozen_front else None
    cached_test_z = student.reduce(test[0]) if (frozen_front and test is not None) else None

    def evaluate_epoch(epoch: int) -> EpochRecord:
        z = cached_z if frozen_front else student.reduce(x)
        y_s = student.head(z)
        loss, l_d, l_s, _ = distill_objective(y_t, y_s, labels, cfg.tau, cfg.lam)
        test_acc = None
        if test is not None:
            tz = cached_test_z if frozen_front else student.reduce(test[0])
            test_acc = _accuracy(student.head(tz), np.asarray(test[1]))
        return EpochRecord(epoch, float(loss), float(l_d), float(l_s), _accuracy(y_s, labels), test_acc)

    history = History([evaluate_epoch(0)])
    opt = SGD(trainables, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        for b, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if frozen_front:
                z = cached_z[idx]
            else:
                acts = student.pre.forward(x[idx])
                feats = acts[-1].reshape(len(idx), -1)
                z = student.map.project_batch(feats)
            y_s, cache = student.head.forward(z)
            loss, _, _, g_ys = distill_objective(y_t[idx], y_s, labels[idx], cfg.tau, cfg.lam)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, b, float(loss))
            g_head, g_z = student.head.backward(cache, g_ys)
            grads: list[np.ndarray] = []
            if cfg.train_head:
                grads += g_head
            if cfg.train_projection:
                centred = feats if student.map.center is None else feats - student.map.center
                grads.append(g_z.T @ centred)
            if cfg.train_pre:
                g_feats = (g_z @ student.map.basis).reshape(acts[-1].shape)
                bundle = student.pre.backward(acts, g_feats)
                grads += [g for layer_grads in bundle.params for g in layer_grads.values()]
            opt.step(grads)
        history.records.append(evaluate_epoch(epoch))
        rec = history.records[-1]
        log.info("epoch %d: loss %.4f (L_D %.4f, L_S %.4f) train acc %.4f", epoch, rec.loss, rec.l_d,
                 rec.l_s, rec.train_acc)
    return student, history
