"""End-to-end reduction: split, snapshot, reduce, fit a head, distill, report."""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileformat
from .data import Dataset, load_split
from .distill import ARTIFACT_FILES, DistillConfig, History, ReducedNet, train_reduced
from .errors import ConfigError, NetReduceError, ParameterError, ShapeError
from .heads import FnnHead, PceModel, fit_fnn, head_param_count, head_storage_bytes, pce_fit
from .nn import Network, load_model, save_model, small_cnn, storage_bytes
from .nn.train import train_classifier
from .reducers import ProjectionMap, as_basis, as_basis_streaming, as_gradients, pod_basis
from .splitter import SplitNetwork, collect_features, split_network

log = logging.getLogger(__name__)

REDUCERS = ("pod", "as")
HEADS = ("pce", "fnn")


@dataclass
class PipelineConfig:
    model: str
    data: str
    cut_layer: int
    rank: int
    reducer: str
    head: str
    test_data: str | None = None
    pce_degree: int = 2
    pce_family: str = "hermite"
    hidden: int = 20
    depth: int = 1
    beta: float = 1.0
    head_epochs: int = 500
    head_lr: float = 0.1
    center: bool = False
    fd_sketch: int | None = None
    normalize_gradients: bool = False
    distill: DistillConfig = field(default_factory=DistillConfig)
    seed: int = 0

    def __post_init__(self):
        if self.reducer not in REDUCERS:
            raise ConfigError(f"reducer must be one of {REDUCERS}, got {self.reducer!r}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.pce_degree < 0 or self.hidden < 1 or self.depth < 1 or self.head_epochs < 0:
            raise ParameterError("pce degree must be >= 0, hidden width, depth >= 1, head epochs >= 0")
        if self.fd_sketch is not None and self.fd_sketch < self.rank:
            raise ParameterError(f"sketch size {self.fd_sketch} must be at least the rank {self.rank}")

    def describe(self) -> dict:
        """Config echo for the report (no output location, so reports compare across runs)."""
        d = asdict(self)
        d["distill"] = asdict(self.distill)
        return d


@contextlib.contextmanager
def stage(name: str):
    """Prefix errors raised inside with the pipeline stage name."""
    try:
        yield
    except NetReduceError as exc:
        if exc.args and not getattr(exc, "stage", None):
            exc.args = (f"[{name}] {exc.args[0]}", *exc.args[1:])
        exc.stage = name
        raise


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels))) if len(labels) else 0.0


def evaluate(predictor, data: Dataset, batch_size: int = 512) -> float:
    """Accuracy of a Network, ReducedNet or any batch callable returning logits."""
    outs = []
    for start in range(0, len(data), batch_size):
        out = np.asarray(predictor(data.inputs[start:start + batch_size]))
        if out.ndim != 2 or out.shape[1] != data.n_class:
            raise ConfigError(f"predictor emits {out.shape[1:]} outputs for a {data.n_class}-class dataset")
        outs.append(out)
    logits = np.concatenate(outs) if outs else np.zeros((0, data.n_class))
    return accuracy(logits, data.labels)


@dataclass
class Prepared:
    """Everything up to and including the projection; shared by sweep cells."""

    cfg: PipelineConfig
    teacher: Network
    split: SplitNetwork
    train: Dataset
    test: Dataset
    pmap: ProjectionMap
    z_train: np.ndarray
    z_test: np.ndarray
    y_train: np.ndarray  # teacher logits
    teacher_acc: float
    teacher_bytes: int


def _load_inputs(cfg: PipelineConfig) -> tuple[Network, Dataset, Dataset]:
    with stage("load"):
        teacher = load_model(cfg.model)
        train = load_split(cfg.data, "train")
        test = load_split(cfg.test_data or cfg.data, "test")
    with stage("validate"):
        for ds in (train, test):
            if ds.shape != teacher.input_shape:
                raise ShapeError(f"{ds.split} images have shape {ds.shape}, model expects {teacher.input_shape}")
            if ds.n_class != int(np.prod(teacher.output_shape)):
                raise ConfigError(f"{ds.split} set has {ds.n_class} classes, model emits {teacher.output_shape}")
        if not 1 <= cfg.cut_layer < len(teacher):
            raise ParameterError(f"cut-off layer must satisfy 1 <= l < {len(teacher)}, got {cfg.cut_layer}")
        n_l = int(np.prod(teacher.shapes[cfg.cut_layer]))
        if not 1 <= cfg.rank <= min(n_l, len(train)):
            raise ParameterError(f"rank must satisfy 1 <= r <= {min(n_l, len(train))}, got {cfg.rank}")
    return teacher, train, test


def reduce_features(cfg: PipelineConfig, split: SplitNetwork, features: np.ndarray,
                    labels: np.ndarray) -> ProjectionMap:
    if cfg.reducer == "pod":
        return pod_basis(features, cfg.rank, center=cfg.center)
    grads = as_gradients(split.post, features, labels)
    if cfg.fd_sketch:
        return as_basis_streaming(grads, cfg.rank, cfg.fd_sketch, normalize=cfg.normalize_gradients)
    return as_basis(grads, cfg.rank, normalize=cfg.normalize_gradients)


def prepare(cfg: PipelineConfig) -> Prepared:
    teacher, train, test = _load_inputs(cfg)
    with stage("split"):
        split = split_network(teacher, cfg.cut_layer)
    with stage("features"):
        feats = collect_features(split.pre, train.inputs)
        feats_test = collect_features(split.pre, test.inputs)
        n_class = train.n_class
        y_train = split.post(feats.T.reshape(len(train), *split.post.input_shape)).reshape(-1, n_class)
        y_test = split.post(feats_test.T.reshape(len(test), *split.post.input_shape)).reshape(-1, n_class)
    with stage("reduce"):
        pmap = reduce_features(cfg, split, feats, train.labels)
        z_train = pmap.project_batch(feats.T)
        z_test = pmap.project_batch(feats_test.T)
    return Prepared(cfg, teacher, split, train, test, pmap, z_train, z_test, y_train,
                    accuracy(y_test, test.labels), storage_bytes(teacher))


def build_head(prep: Prepared, kind: str, hidden: int | None = None, depth: int | None = None):
    """Fitted PCE (least squares on teacher logits) or an FNN head regressed
    onto the teacher logits from a seeded random start."""
    cfg = prep.cfg
    with stage("fit-head"):
        if kind == "pce":
            return pce_fit(prep.z_train, prep.y_train, cfg.pce_degree, cfg.pce_family)
        rng = np.random.default_rng(cfg.seed)
        head = FnnHead.init(cfg.rank, hidden or cfg.hidden, prep.y_train.shape[1], rng,
                            depth=depth or cfg.depth, beta=cfg.beta)
        fit_fnn(head, prep.z_train, prep.y_train, cfg.head_epochs, cfg.head_lr, seed=cfg.seed)
        return head


@dataclass
class Outcome:
    student: ReducedNet
    history: History
    epoch0_acc: float
    final_acc: float


def distill_head(prep: Prepared, head: PceModel | FnnHead) -> Outcome:
    cfg = prep.cfg
    student = ReducedNet(copy.deepcopy(prep.split.pre), copy.deepcopy(prep.pmap), head)
    with stage("distill"):
        student, history = train_reduced(student, prep.teacher, prep.train.inputs, prep.train.labels,
                                         cfg.distill, test=(prep.test.inputs, prep.test.labels),
                                         teacher_logits=prep.y_train)
    return Outcome(student, history, history.records[0].test_acc, history.records[-1].test_acc)


@dataclass
class Report:
    config: dict
    teacher_acc: float
    epoch0_acc: float
    final_acc: float
    epochs: int
    storage: dict
    init_seconds: float = 0.0
    train_seconds: float = 0.0

    def to_json(self) -> str:
        """Deterministic record: everything except wall-clock times."""
        body = {"config": self.config,
                "accuracy": {"teacher": self.teacher_acc, "epoch_0": self.epoch0_acc,
                             f"epoch_{self.epochs}": self.final_acc},
                "storage": self.storage}
        return json.dumps(body, indent=2) + "\n"

    def timing_json(self) -> str:
        return json.dumps({"init_seconds": self.init_seconds, "train_seconds": self.train_seconds}) + "\n"

    def to_text(self) -> str:
        s = self.storage
        mb = 1e6
        cfg = self.config
        name = f"{cfg['reducer'].upper()}+{cfg['head'].upper()} ({cfg['cut_layer']})"
        lines = [
            f"network            {name}",
            f"teacher accuracy   {100 * self.teacher_acc:.2f}%",
            f"epoch 0 accuracy   {100 * self.epoch0_acc:.2f}%",
            f"epoch {self.epochs:<2d} accuracy  {100 * self.final_acc:.2f}%",
            f"storage (MB)       pre-model {s['pre_model_bytes'] / mb:.6f}  "
            f"projection {s['projection_bytes'] / mb:.6f}  head {s['head_bytes'] / mb:.6f}",
            f"total (MB)         {s['total'] / mb:.6f} vs teacher {s['teacher_total'] / mb:.6f} "
            f"(compression {s['compression_ratio']:.2f}x)",
            f"time               init {self.init_seconds:.1f} s  train {self.train_seconds:.1f} s",
        ]
        return "\n".join(lines) + "\n"


def storage_from_files(directory, teacher_path) -> dict:
    """Storage breakdown recomputed from the serialized artifacts."""
    directory = Path(directory)
    pre, proj, head = (fileformat.artifact_size_on_disk(directory / f) for f in ARTIFACT_FILES)
    teacher = fileformat.artifact_size_on_disk(teacher_path)
    total = pre + proj + head
    return {"pre_model_bytes": pre, "projection_bytes": proj, "head_bytes": head, "total": total,
            "teacher_total": teacher, "compression_ratio": teacher / total}


@contextlib.contextmanager
def staged_output(out):
    """Yield a scratch directory that replaces ``out``'s contents only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(exist_ok=True)
    for item in sorted(tmp.rglob("*"), key=lambda p: len(p.parts)):
        target = out / item.relative_to(tmp)
        if item.is_dir():
            target.mkdir(exist_ok=True)
        else:
            os.replace(item, target)
    shutil.rmtree(tmp, ignore_errors=True)


def run_pipeline(cfg: PipelineConfig, out) -> Report:
    """Build, distill, evaluate and save a reduced network under ``out``.

    Writes ``reduced/{pre,projection,head}.{json,bin}``, ``report.json``
    (deterministic), ``report.txt``, ``history.jsonl`` and ``timing.json``.
    """
    t0 = time.monotonic()
    prep = prepare(cfg)
    head = build_head(prep, cfg.head)
    t1 = time.monotonic()
    outcome = distill_head(prep, head)
    t2 = time.monotonic()
    with stage("save"), staged_output(out) as tmp:
        outcome.student.save(tmp / "reduced")
        report = Report(cfg.describe(), prep.teacher_acc, outcome.epoch0_acc, outcome.final_acc,
                        cfg.distill.epochs, storage_from_files(tmp / "reduced", cfg.model),
                        round(t1 - t0, 3), round(t2 - t1, 3))
        (tmp / "report.json").write_text(report.to_json())
        (tmp / "report.txt").write_text(report.to_text())
        (tmp / "history.jsonl").write_text(outcome.history.to_jsonl())
        (tmp / "timing.json").write_text(report.timing_json())
    log.info("pipeline done: epoch 0 %.4f, final %.4f", report.epoch0_acc, report.final_acc)
    return report


SWEEP_COLUMNS = ("hidden", "depth", "epoch0_acc", "final_acc", "head_params", "head_param_bytes",
                 "head_file_bytes", "status")


def sweep_heads(cfg: PipelineConfig, widths, depths, out=None) -> list[dict]:
    """FNN heads of every (width, depth) on a shared projection.

    A failing cell is recorded with its error and the sweep moves on. With
    ``out`` the table is written as ``sweep.tsv`` and ``sweep.json``.
    """
    if cfg.head != "fnn":
        raise ConfigError("the head sweep needs head = fnn")
    prep = prepare(cfg)
    rows = []
    for depth in depths:
        for width in widths:
            row = {"hidden": int(width), "depth": int(depth)}
            try:
                head = build_head(prep, "fnn", hidden=width, depth=depth)
                outcome = distill_head(prep, head)
                row.update(epoch0_acc=outcome.epoch0_acc, final_acc=outcome.final_acc,
                           head_params=head_param_count(head), head_param_bytes=4 * head_param_count(head),
                           head_file_bytes=head_storage_bytes(head), status="ok")
            except NetReduceError as exc:
                log.warning("sweep cell width=%s depth=%s failed: %s", width, depth, exc)
                row.update(epoch0_acc=None, final_acc=None, head_params=None, head_param_bytes=None,
                           head_file_bytes=None, status=f"failed: {exc}")
            rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        fileformat.atomic_write(out / "sweep.tsv", format_table(rows).encode())
        fileformat.atomic_write(out / "sweep.json", (json.dumps(rows, indent=2) + "\n").encode())
    return rows


def format_table(rows: list[dict]) -> str:
    lines = ["\t".join(SWEEP_COLUMNS)]
    for row in rows:
        lines.append("\t".join("" if row[c] is None else str(row[c]) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"


def train_teacher(data, out, epochs: int = 60, lr: float = 0.02, seed: int = 0,
                  channels=(8, 16), hidden: int = 64) -> tuple[Network, float]:
    """Train the reference CNN on a dataset directory and save it to ``out``.

    Returns the network (float32-rounded, as stored) and its test accuracy.
    """
    with stage("load"):
        train = load_split(data, "train")
        test = load_split(data, "test")
    rng = np.random.default_rng(seed)
    net = small_cnn(train.shape, train.n_class, rng, channels=channels, hidden=hidden)
    with stage("train-teacher"):
        train_classifier(net, train.inputs, train.labels, epochs, lr=lr, seed=seed)
    with stage("save"):
        save_model(net, out)
        net = load_model(out)
    return net, evaluate(net, test)
