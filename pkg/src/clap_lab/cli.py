"""Command line pipeline: generate data, train, evaluate, report, annotate.

Every command is a pure function of its config file, input artifacts, and
seed; repeated invocations produce identical outputs (wall-clock fields in
the metrics stream excepted). Exit codes: 0 success, 1 runtime failure,
2 usage or config error. The environment variable ``CLAP_LAB_DATA_DIR``
provides the default root for relative dataset paths.

An experiment config is a single JSON document:

    {
      "seed": 0,
      "out_dir": "runs/exp",
      "dataset": "path/to/dataset"            # or {"spec": {...}, "n": 20000}
      "model":  {"k_c": 5, "k_s": 5, "preset": "linear",
                 "likelihood": "gaussian", "sigma": 0.05, "hidden": 128},
      "train":  {"steps": 5000, "batch_size": 132, "learning_rate": 5e-4,
                 "mode": "clap", "eval_every": 200, "checkpoint_every": 0},
      "objective": {"lambda_sparsity": 0.01, "beta_pred": 10.0,
                    "mc_samples": 1}
    }
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evalkit, interpret, synthgen, trainer
from .model import CLAPModel, ModelDims, load_checkpoint
from .objectives import ObjectiveConfig
from .synthgen import GenerativeSpec, LabeledDataset
from .trainer import TrainConfig


class UsageError(Exception):
    """Bad flags or config content; maps to exit code 2."""


def _resolve_dataset_path(path: str) -> str:
    if os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get("CLAP_LAB_DATA_DIR")
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path) as f:
            config = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}")
    if "seed" not in config:
        raise UsageError("config must declare a seed")
    return config


def _spec_from_config(config: dict) -> GenerativeSpec:
    ds = config.get("dataset")
    spec_dict = None
    if isinstance(ds, dict):
        if "spec" in ds:
            spec_dict = ds["spec"]
        elif "spec_path" in ds:
            with open(ds["spec_path"]) as f:
                spec_dict = json.load(f)
    if spec_dict is None and "spec" in config:
        spec_dict = config["spec"]
    if spec_dict is None:
        raise UsageError("config does not carry a generative spec")
    try:
        return GenerativeSpec.from_json_dict(spec_dict)
    except (KeyError, synthgen.InvalidSpecError) as e:
        raise UsageError(f"invalid generative spec: {e}")


def _dataset_from_config(config: dict, seed: int) -> LabeledDataset:
    ds = config.get("dataset")
    if isinstance(ds, str):
        path = _resolve_dataset_path(ds)
        if not os.path.isdir(path):
            raise UsageError(f"dataset directory not found: {ds}")
        return LabeledDataset.load(path)
    if isinstance(ds, dict) and "n" in ds:
        spec = _spec_from_config(config)
        return synthgen.sample_dataset(spec, int(ds["n"]), seed)
    raise UsageError("config 'dataset' must be a path or an inline spec with n")


def _model_from_config(config: dict, dataset: LabeledDataset) -> CLAPModel:
    m = dict(config.get("model", {}))
    if "k_c" not in m or "k_s" not in m:
        raise UsageError("model config must declare k_c and k_s")
    mode = config.get("train", {}).get("mode", "clap")
    num_labels = 1 if mode == "single_label" else dataset.num_labels
    dims = ModelDims(k_c=int(m["k_c"]), k_s=int(m["k_s"]),
                     obs_shape=dataset.obs_shape, num_labels=num_labels)
    return CLAPModel(
        dims,
        preset=m.get("preset", "mlp"),
        likelihood=m.get("likelihood", "gaussian"),
        sigma=float(m.get("sigma", 0.1)),
        hidden=int(m.get("hidden", 128)),
        psi_hidden=m.get("psi_hidden"),
        init_seed=int(m.get("init_seed", config["seed"])),
    )


def _train_config_from(config: dict, seed: int) -> TrainConfig:
    t = dict(config.get("train", {}))
    o = dict(config.get("objective", {}))
    try:
        objective = ObjectiveConfig(
            lambda_sparsity=float(o.get("lambda_sparsity", 0.0)),
            beta_pred=float(o.get("beta_pred", 1.0)),
            mc_samples=int(o.get("mc_samples", 1)),
            sparsity_mode=o.get("sparsity_mode", "surrogate"),
            lambda_decay=o.get("lambda_decay", "none"),
        )
        return TrainConfig(
            steps=int(t.get("steps", 5000)),
            batch_size=int(t.get("batch_size", 132)),
            learning_rate=float(t.get("learning_rate", 5e-4)),
            seed=seed,
            mode=t.get("mode", "clap"),
            label_index=t.get("label_index"),
            eval_every=int(t.get("eval_every", 200)),
            checkpoint_every=int(t.get("checkpoint_every", 0)),
        )
    except ValueError as e:
        raise UsageError(f"invalid train config: {e}")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.spec:
        with open(args.spec) as f:
            spec = GenerativeSpec.from_json_dict(json.load(f))
        seed = args.seed if args.seed is not None else 0
        n = args.n
    else:
        if not args.config:
            raise UsageError("gen-data needs --spec or --config")
        config = _load_config(args.config)
        spec = _spec_from_config(config)
        seed = args.seed if args.seed is not None else config["seed"]
        ds = config.get("dataset")
        n = args.n or (ds.get("n") if isinstance(ds, dict) else None)
    if not n:
        raise UsageError("gen-data needs a positive --n")
    if not args.out:
        raise UsageError("gen-data needs --out")

    report = synthgen.validate_assumptions(spec)
    for line in report.summary_lines():
        print(line)
    dataset = synthgen.sample_dataset(spec, n, seed)
    dataset.save(args.out)
    print(f"wrote {len(dataset)} rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = args.seed if args.seed is not None else config["seed"]
    if args.mode:
        config.setdefault("train", {})["mode"] = args.mode
    if args.label_index is not None:
        config.setdefault("train", {})["label_index"] = args.label_index
    out_dir = args.out or config.get("out_dir")
    if not out_dir:
        raise UsageError("train needs --out or out_dir in the config")

    dataset = _dataset_from_config(config, seed)
    train_config = _train_config_from(config, seed)
    if args.resume:
        if not os.path.exists(args.resume):
            raise UsageError(f"checkpoint not found: {args.resume}")
        model = load_checkpoint(args.resume)
    else:
        model = _model_from_config(config, dataset)
    trainer.train(model, dataset, train_config, out_dir=out_dir)
    print(f"final checkpoint: {os.path.join(out_dir, 'final.ckpt')}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    path = _resolve_dataset_path(args.dataset)
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {args.dataset}")
    model = load_checkpoint(args.checkpoint)
    dataset = LabeledDataset.load(path)
    spec = None
    if args.spec:
        with open(args.spec) as f:
            spec = GenerativeSpec.from_json_dict(json.load(f))
    report = evalkit.evaluation_report(model, dataset, spec=spec,
                                       seed=args.seed or 0)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "evaluation.json"), "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def _traversal_config(args) -> interpret.TraversalConfig:
    dims = None
    if args.dims:
        dims = [int(d) for d in args.dims.split(",")]
    return interpret.TraversalConfig(dims=dims, steps=args.steps)


def cmd_traverse(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    path = _resolve_dataset_path(args.dataset)
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {args.dataset}")
    model = load_checkpoint(args.checkpoint)
    dataset = LabeledDataset.load(path)
    config = _traversal_config(args)
    _, std = interpret.posterior_mean_stats(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    for idx in _parse_instances(args.instances, len(dataset)):
        result = interpret.traverse(model, dataset.x[idx], config, std)
        grid = interpret.traversal_grid_image(result)
        grid.save(os.path.join(args.out, f"instance_{idx:05d}_traversal.png"))
    print(f"traversal grids written to {args.out}")
    return 0


def _parse_instances(value: str, n: int) -> list:
    out = []
    for part in value.split(","):
        idx = int(part)
        if not 0 <= idx < n:
            raise UsageError(f"instance index {idx} out of range")
        out.append(idx)
    return out


def cmd_report(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    path = _resolve_dataset_path(args.dataset)
    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {args.dataset}")
    model = load_checkpoint(args.checkpoint)
    dataset = LabeledDataset.load(path)
    instances = _parse_instances(args.instances, len(dataset))
    interpret.render_report(model, dataset, args.out, instances=instances,
                            config=_traversal_config(args),
                            with_diff_heatmaps=args.diff_heatmaps)
    print(f"report written to {os.path.join(args.out, 'report.json')}")
    return 0


def cmd_annotate(args) -> int:
    report_path = args.report
    if os.path.isdir(report_path):
        report_path = os.path.join(report_path, "report.json")
    if not os.path.exists(report_path):
        raise UsageError(f"report not found: {args.report}")
    try:
        interpret.annotate_report(report_path, args.dim, args.label)
    except KeyError as e:
        raise UsageError(str(e))
    print(f"dimension {args.dim} annotated as {args.label!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clap-lab",
        description="concept-learning VAE lab: data, training, evaluation, reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a dataset from a generative spec")
    p.add_argument("--spec", help="path to a generative spec JSON")
    p.add_argument("--config", help="experiment config with an inline spec")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--label-index", type=int, dest="label_index")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", help="spec JSON enabling the Bayes accuracy oracle")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traverse", help="write traversal grids only")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--instances", default="0")
    p.add_argument("--dims", help="comma-separated core dims (default: active)")
    p.add_argument("--steps", type=int, default=7)
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("report", help="write traversal grids plus report.json")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--instances", default="0")
    p.add_argument("--dims")
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--diff-heatmaps", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("annotate", help="fill a concept label in a report")
    p.add_argument("--report", required=True, help="report.json or its directory")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--label", required=True)
    p.set_defaults(func=cmd_annotate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except synthgen.InvalidSpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure contract
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
