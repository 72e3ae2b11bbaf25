"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileformat
from .data import load_split, write_synthetic
from .distill import DistillConfig, ReducedNet, train_reduced
from .errors import ConfigError, NetReduceError, ValidationError
from .heads import FnnHead, fit_fnn, head_storage_bytes, load_head, pce_fit, save_head
from .nn import load_model, save_model
from .pipeline import (PipelineConfig, evaluate, format_table, reduce_features, run_pipeline, stage,
                       storage_from_files, sweep_heads, train_teacher)
from .reducers import ProjectionMap
from .splitter import collect_features, split_network

log = logging.getLogger("netreduce")


# shared flags --------------------------------------------------------------

def _add(p: argparse.ArgumentParser, *names: str, required: bool = False) -> None:
    specs = {
        "model": dict(flag="--model", help="trained model manifest (.json)"),
        "data": dict(flag="--data", help="dataset directory or .nsds file"),
        "cut-layer": dict(flag="--cut-layer", type=int, help="cut-off layer l (1 <= l < L)"),
        "rank": dict(flag="--rank", type=int, help="reduced dimension r"),
        "reducer": dict(flag="--reducer", choices=["pod", "as"]),
        "head": dict(flag="--head", choices=["pce", "fnn"]),
        "out": dict(flag="--out", help="output path"),
    }
    for name in names:
        spec = dict(specs[name])
        p.add_argument(spec.pop("flag"), required=required, **spec)


def _head_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pce-degree", type=int, default=2)
    p.add_argument("--pce-family", choices=["hermite", "legendre"], default="hermite")
    p.add_argument("--hidden", type=int, default=20, help="FNN hidden width")
    p.add_argument("--depth", type=int, default=1, help="FNN hidden layers")
    p.add_argument("--head-epochs", type=int, default=500, help="FNN pre-training epochs")
    p.add_argument("--head-lr", type=float, default=0.1, help="FNN pre-training relative step")


def _reduce_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--center", action="store_true", help="mean-centre POD snapshots")
    p.add_argument("--sketch", type=int, default=None, help="AS via a Frequent Directions sketch of this size")
    p.add_argument("--normalize-gradients", action="store_true")


def _distill_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--tau", type=float, default=4.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--train-projection", action="store_true")
    p.add_argument("--train-pre", action="store_true")


def _distill_config(args) -> DistillConfig:
    return DistillConfig(tau=args.tau, lam=args.lam, epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, momentum=args.momentum, seed=args.seed,
                         train_projection=args.train_projection, train_pre=args.train_pre)


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(model=args.model, data=args.data, cut_layer=args.cut_layer, rank=args.rank,
                          reducer=args.reducer, head=args.head, pce_degree=args.pce_degree,
                          pce_family=args.pce_family, hidden=args.hidden, depth=args.depth,
                          head_epochs=args.head_epochs, head_lr=args.head_lr, center=args.center,
                          fd_sketch=args.sketch, normalize_gradients=args.normalize_gradients,
                          distill=_distill_config(args), seed=args.seed)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# feature snapshots on disk -------------------------------------------------

def save_features(path, features: np.ndarray, labels: np.ndarray, cut: int) -> None:
    fields = {"n_l": features.shape[0], "n_samples": features.shape[1], "cut_layer": cut}
    fileformat.write_artifact(path, "features", fields, [("features", features), ("labels", labels)])


def load_features(path) -> tuple[np.ndarray, np.ndarray, int]:
    manifest, arrays = fileformat.read_artifact(path, kind="features")
    try:
        return arrays["features"], arrays["labels"].astype(np.int64), int(manifest["cut_layer"])
    except KeyError as exc:
        raise ValidationError(f"{path}: features artifact lacks {exc}") from None


# subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    paths = write_synthetic(args.out, seed=args.seed, n_class=args.n_class, n_per_class=args.n_per_class,
                            noise=args.noise)
    _emit({"train": str(paths[0]), "test": str(paths[1])})
    return 0


def cmd_train_teacher(args) -> int:
    _, acc = train_teacher(args.data, args.out, epochs=args.epochs, lr=args.lr, seed=args.seed)
    _emit({"model": args.out, "test_accuracy": acc})
    return 0


def cmd_split(args) -> int:
    with stage("split"):
        parts = split_network(load_model(args.model), args.cut_layer)
    out = Path(args.out)
    save_model(parts.pre, out / "pre.json")
    save_model(parts.post, out / "post.json")
    _emit({"pre": str(out / "pre.json"), "post": str(out / "post.json"),
           "pre_layers": len(parts.pre), "post_layers": len(parts.post),
           "n_l": int(np.prod(parts.pre.output_shape))})
    return 0


def cmd_features(args) -> int:
    with stage("features"):
        parts = split_network(load_model(args.model), args.cut_layer)
        data = load_split(args.data, args.split)
        feats = collect_features(parts.pre, data.inputs)
    save_features(args.out, feats, data.labels, args.cut_layer)
    _emit({"features": args.out, "n_l": feats.shape[0], "n_samples": feats.shape[1]})
    return 0


def _split_for(args, cut: int):
    return split_network(load_model(args.model), cut)


def cmd_reduce(args) -> int:
    feats, labels, cut = load_features(args.features)
    cfg = argparse.Namespace(reducer=args.reducer, rank=args.rank, center=args.center,
                             fd_sketch=args.sketch, normalize_gradients=args.normalize_gradients)
    with stage("reduce"):
        if args.reducer == "as" and not args.model:
            raise ConfigError("the active subspace reducer needs --model for the post-model gradients")
        parts = _split_for(args, cut) if args.reducer == "as" else None
        pmap = reduce_features(cfg, parts, feats, labels)
    pmap.save(args.out)
    _emit({"projection": args.out, "r": pmap.r, "spectrum": pmap.spectrum.tolist()})
    return 0


def cmd_fit_head(args) -> int:
    feats, labels, cut = load_features(args.features)
    pmap = ProjectionMap.load(args.projection)
    with stage("fit-head"):
        parts = _split_for(args, cut)
        z = pmap.project_batch(feats.T)
        y = parts.post(feats.T.reshape(feats.shape[1], *parts.post.input_shape)).reshape(feats.shape[1], -1)
        if args.head == "pce":
            head = pce_fit(z, y, args.pce_degree, args.pce_family)
        else:
            head = FnnHead.init(pmap.r, args.hidden, y.shape[1], np.random.default_rng(args.seed),
                                depth=args.depth)
            fit_fnn(head, z, y, args.head_epochs, args.head_lr, seed=args.seed)
    save_head(head, args.out)
    _emit({"head": args.out, "kind": args.head, "bytes": head_storage_bytes(head)})
    return 0


def _assemble(args) -> ReducedNet:
    """Reduced net from --model/--cut-layer plus saved projection and head."""
    with stage("load"):
        parts = split_network(load_model(args.model), args.cut_layer)
        return ReducedNet(parts.pre, ProjectionMap.load(args.projection), load_head(args.head_file))


def cmd_distill(args) -> int:
    student = _assemble(args)
    teacher = load_model(args.model)
    train = load_split(args.data, "train")
    cfg = _distill_config(args)
    with stage("distill"):
        student, history = train_reduced(student, teacher, train.inputs, train.labels, cfg)
    out = Path(args.out)
    student.save(out)
    fileformat.atomic_write(out / "history.jsonl", history.to_jsonl().encode())
    _emit({"reduced": str(out), "final_train_accuracy": history.records[-1].train_acc})
    return 0


def cmd_eval(args) -> int:
    data = load_split(args.data, args.split)
    target = Path(args.model)
    with stage("eval"):
        if target.is_dir():
            predictor = ReducedNet.load(target)
            storage = storage_from_files(target, args.teacher) if args.teacher else None
        else:
            predictor = load_model(target)
            storage = None
        acc = evaluate(predictor, data)
    result = {"accuracy": acc, "n_samples": len(data)}
    if storage:
        result["storage"] = storage
    _emit(result)
    return 0


def cmd_pipeline(args) -> int:
    report = run_pipeline(_pipeline_config(args), args.out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_sweep(args) -> int:
    args.head = "fnn"
    rows = sweep_heads(_pipeline_config(args), args.widths, args.depths, out=args.out)
    sys.stdout.write(format_table(rows))
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netreduce", description="Compress a trained network: split, "
                                     "project intermediate features, replace the tail, distill.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = cmd("gen-data", cmd_gen_data, "write the synthetic image benchmark")
    _add(p, "out", required=True)
    p.add_argument("--n-class", type=int, default=4)
    p.add_argument("--n-per-class", type=int, default=250)
    p.add_argument("--noise", type=float, default=1.3)

    p = cmd("train-teacher", cmd_train_teacher, "train the reference CNN on a dataset")
    _add(p, "data", "out", required=True)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.02)

    p = cmd("split", cmd_split, "cut a model into pre- and post-model")
    _add(p, "model", "cut-layer", "out", required=True)

    p = cmd("features", cmd_features, "snapshot pre-model outputs")
    _add(p, "model", "cut-layer", "data", "out", required=True)
    p.add_argument("--split", choices=["train", "test"], default="train")

    p = cmd("reduce", cmd_reduce, "compute a POD or AS projection from snapshots")
    _add(p, "reducer", "rank", "out", required=True)
    _add(p, "model")
    p.add_argument("--features", required=True)
    _reduce_flags(p)

    p = cmd("fit-head", cmd_fit_head, "fit a PCE or FNN head on reduced coordinates")
    _add(p, "model", "head", "out", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--projection", required=True)
    _head_flags(p)

    p = cmd("distill", cmd_distill, "retrain a reduced net by knowledge distillation")
    _add(p, "model", "data", "cut-layer", "out", required=True)
    p.add_argument("--projection", required=True)
    p.add_argument("--head-file", required=True)
    _distill_flags(p)

    p = cmd("eval", cmd_eval, "accuracy of a model or reduced-net directory")
    _add(p, "model", "data", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--teacher", help="teacher manifest, adds a storage comparison")

    for name, func, help_ in (("pipeline", cmd_pipeline, "run every stage and write a report"),
                              ("sweep-heads", cmd_sweep, "grid of FNN head widths and depths")):
        p = cmd(name, func, help_)
        _add(p, "model", "data", "cut-layer", "rank", "reducer", "out", required=True)
        if name == "pipeline":
            _add(p, "head", required=True)
        else:
            p.add_argument("--widths", type=_int_list, default=[10, 20, 30, 40])
            p.add_argument("--depths", type=_int_list, default=[1, 2, 3, 4])
        _head_flags(p)
        _reduce_flags(p)
        _distill_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NetReduceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
