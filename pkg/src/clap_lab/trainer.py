"""Optimization loop, ablation modes, metrics stream, and checkpoints.

Training is Adam ascent on the combined objective with uniform
with-replacement minibatches from a seeded stream, so a (config, seed) pair
fully determines the run. Optional knobs: a cosine learning-rate schedule,
a proximal treatment of the group penalty (exact column zeros instead of a
subgradient noise floor), and a core-pathway warmup that freezes the core
heads, classifier, and core bottleneck columns for the first steps so the
unpenalized style pathway captures label-independent structure first and
core slots are recruited by predictive pressure only. Ablation modes:

* ``clap``         - full objective,
* ``p_only``       - prediction branch only; concept-branch parameters are
  excluded from the optimizer and never touched,
* ``no_sparsity``  - both branches, penalty forced to zero,
* ``single_label`` - only the configured label column is visible anywhere.

Metrics go to an append-only JSONL stream (wall time is kept in its own key
so determinism checks can ignore it); checkpoints use the zip format from
the model module.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .evalkit import active_core_columns
from .model import CLAPModel, ModelDims, save_checkpoint, load_checkpoint  # noqa: F401  (re-exported)
from .objectives import ObjectiveConfig, clap_loss, elbo_p, sparsity_surrogate
from .synthgen import LabeledDataset

MODES = ("clap", "p_only", "no_sparsity", "single_label")


class TrainingDivergedError(RuntimeError):
    """The objective became non-finite; the diagnostic record was written."""


@dataclass
class TrainConfig:
    steps: int
    batch_size: int
    learning_rate: float
    seed: int
    mode: str = "clap"
    label_index: int | None = None
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optimizer: str = "adam"
    weight_decay: float = 0.0
    lr_schedule: str = "constant"   # "constant" | "cosine"
    prox_sparsity: bool = False     # apply the group penalty proximally
    core_warmup_steps: int = 0      # freeze the core pathway this many steps
    eval_every: int = 200
    checkpoint_every: int = 0      # 0 = final checkpoint only

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "single_label" and self.label_index is None:
            raise ValueError("single_label mode needs label_index")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.core_warmup_steps < self.steps:
            raise ValueError("core_warmup_steps must lie in [0, steps)")

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


def _concept_branch_parameters(model: CLAPModel) -> set:
    names = set()
    for name, _ in model.named_parameters():
        if (name.startswith("backbone_cl") or name.startswith("head_core_cl")
                or name.startswith("prior_cl")):
            names.add(name)
    return names


def _step_seed(base: int, step: int) -> int:
    return (base * 1_000_003 + step * 2_654_435_761) % (2 ** 63 - 1)


def _warmup_active(config: TrainConfig) -> bool:
    """The warmup exists to let the group penalty select a minimal support,
    so it only applies when the mode's loss actually contains the penalty."""
    return (config.core_warmup_steps > 0
            and config.mode in ("clap", "single_label")
            and config.objective.lambda_sparsity > 0
            and config.objective.sparsity_mode == "surrogate")


def _effective_lambda(config: TrainConfig, step: int) -> float:
    lam = config.objective.lambda_sparsity
    if config.objective.lambda_decay == "linear":
        lam = lam * (1.0 - step / config.steps)
    return lam


def _effective_lr(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine":
        import math
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
    return config.learning_rate


def _prox_group_columns(model: CLAPModel, threshold: float) -> None:
    """Proximal step for the stacked-core-column group penalty.

    Each core column of (B; C) has its norm reduced by ``threshold`` (to
    exactly zero when below it), the closed-form proximal operator of the
    convex surrogate.
    """
    with torch.no_grad():
        k_c = model.dims.k_c
        B = model.bottleneck
        C = model.classifier_C
        stacked = torch.cat([B[:, :k_c], C], dim=0)
        norms = torch.linalg.vector_norm(stacked, dim=0)
        scale = torch.clamp(1.0 - threshold / norms.clamp_min(1e-30), min=0.0)
        B[:, :k_c] *= scale
        C *= scale


def train(model: CLAPModel, dataset: LabeledDataset, config: TrainConfig,
          out_dir=None):
    """Run the configured optimization; returns (model, metrics history).

    The model is mutated in place. When ``out_dir`` is given, metrics stream
    to ``metrics.jsonl`` and checkpoints are written there, ending with
    ``final.ckpt``.
    """
    y_all = dataset.y
    if config.mode == "single_label":
        if not 0 <= config.label_index < dataset.num_labels:
            raise ValueError(f"label_index {config.label_index} out of range")
        y_all = y_all[:, [config.label_index]]
    if dataset.obs_shape != model.dims.obs_shape:
        raise ValueError(
            f"dataset shape {dataset.obs_shape} != model {model.dims.obs_shape}")
    if y_all.shape[1] != model.dims.num_labels:
        raise ValueError(
            f"dataset provides {y_all.shape[1]} labels, model expects "
            f"{model.dims.num_labels}")

    x_t = torch.from_numpy(dataset.x).float()
    y_t = torch.from_numpy(y_all.astype(np.float32))
    model.set_mixture_weights(model.empirical_label_weights(y_all))

    excluded = _concept_branch_parameters(model) if config.mode == "p_only" else set()
    core_path = ("head_core_p", "head_core_cl", "classifier_C", "classifier_bias")
    core_params, other_params = [], []
    for name, p in model.named_parameters():
        if name in excluded:
            continue
        (core_params if name.startswith(core_path) else other_params).append(p)
    opt = torch.optim.Adam(
        [{"params": other_params}, {"params": core_params}],
        lr=config.learning_rate, weight_decay=config.weight_decay)

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)           # dropout stream, when present
    n = len(dataset)
    eval_idx = np.arange(min(n, 2048))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        metrics_file = open(metrics_path, "a")
    else:
        metrics_file = None

    history = []
    step_objectives = np.empty(config.steps)
    t_start = time.monotonic()
    try:
        model.train()
        for step in range(1, config.steps + 1):
            idx = rng.integers(0, n, size=config.batch_size)
            batch = (x_t[idx], y_t[idx])
            lam = _effective_lambda(config, step - 1)
            lr = _effective_lr(config, step - 1)
            in_warmup = _warmup_active(config) and step <= config.core_warmup_steps
            opt.param_groups[0]["lr"] = lr
            opt.param_groups[1]["lr"] = 0.0 if in_warmup else lr
            use_prox = (config.prox_sparsity
                        and config.mode in ("clap", "single_label")
                        and config.objective.sparsity_mode == "surrogate")
            obj_cfg = dataclasses.replace(
                config.objective, lambda_sparsity=0.0 if use_prox else lam)
            seed = _step_seed(config.seed, step)

            opt.zero_grad()
            if config.mode == "p_only":
                value, raw_terms = elbo_p(model, batch[0], batch[1], obj_cfg, seed)
                total = value.mean()
                terms = {k: v.mean().item() for k, v in raw_terms.items()}
                terms["total"] = float(total.detach())
            else:
                if config.mode == "no_sparsity":
                    obj_cfg = dataclasses.replace(obj_cfg, lambda_sparsity=0.0)
                total, terms = clap_loss(model, batch, obj_cfg, seed)

            if not torch.isfinite(total):
                record = {"step": step, "event": "divergence",
                          "terms": {k: float(v) for k, v in terms.items()}}
                if metrics_file:
                    metrics_file.write(json.dumps(record) + "\n")
                    metrics_file.flush()
                raise TrainingDivergedError(f"non-finite objective at step {step}")

            (-total).backward()
            if in_warmup and model.bottleneck.grad is not None:
                model.bottleneck.grad[:, :model.dims.k_c] = 0.0
            opt.step()
            if use_prox and not in_warmup:
                _prox_group_columns(model, lam * lr)
            step_objectives[step - 1] = float(total.detach())

            if step % config.eval_every == 0 or step == config.steps:
                record = _metrics_record(model, config, step, terms,
                                         x_t[eval_idx], y_all[eval_idx],
                                         time.monotonic() - t_start)
                history.append(record)
                if metrics_file:
                    metrics_file.write(json.dumps(record) + "\n")
                    metrics_file.flush()
            if (config.checkpoint_every > 0 and out_dir is not None
                    and step % config.checkpoint_every == 0):
                save_checkpoint(model, os.path.join(out_dir, f"step_{step:07d}.ckpt"))
        model.eval()
    finally:
        if metrics_file:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "final.ckpt"))
    return model, {"records": history, "step_objectives": step_objectives}


def _metrics_record(model, config, step, terms, x_eval, y_eval, wall_time):
    was_training = model.training
    model.eval()
    with torch.no_grad():
        q = model.encode_p(x_eval)
        probs = model.classify(q.core_mean)
        pred = (probs >= 0.5).numpy().astype(np.uint8)
        acc = float((pred == y_eval).mean())
        surrogate = float(sparsity_surrogate(model.bottleneck, model.classifier_C))
    if was_training:
        model.train()
    record = {
        "step": step,
        "elbo_p": terms.get("elbo_p"),
        "pred_acc_train": acc,
        "sparsity_surrogate": surrogate,
        "active_columns": len(active_core_columns(model)),
        "wall_time_s": wall_time,
    }
    if config.mode != "p_only":
        record["elbo_cl"] = terms.get("elbo_cl")
    return record


@dataclass
class DefaultSetup:
    """Bundle returned by default_config: training plus model settings."""

    train: TrainConfig
    dims: ModelDims
    preset: str
    likelihood: str
    sigma: float


def default_config(dataset_kind: str, *, num_labels: int = 3,
                   obs_dim: int | None = None,
                   k_core_hint: int | None = None,
                   k_style_hint: int | None = None,
                   seed: int = 0) -> DefaultSetup:
    """Reference settings per dataset kind.

    Image kinds use the convolutional preset with latent dims (10, 20),
    Bernoulli decoding, batch 132, learning rate 5e-4, and the toy-image
    weight pair (beta_pred, lambda) = (50, 0.05); step counts are desk-scale
    (5000 for vectors, 20000 for images) rather than full-scale. Vector data
    gets a Gaussian likelihood and latent dims from the hints plus slack.
    """
    if dataset_kind in ("image", "toy_image"):
        dims = ModelDims(k_c=10, k_s=20, obs_shape=(64, 64, 3),
                         num_labels=num_labels)
        train = TrainConfig(
            steps=20000, batch_size=132, learning_rate=5e-4, seed=seed,
            objective=ObjectiveConfig(lambda_sparsity=0.05, beta_pred=50.0),
        )
        return DefaultSetup(train, dims, "table2", "bernoulli", 0.1)
    if dataset_kind == "vector":
        if obs_dim is None or k_core_hint is None or k_style_hint is None:
            raise ValueError("vector kind needs obs_dim and latent dim hints")
        dims = ModelDims(k_c=k_core_hint + 2, k_s=k_style_hint + 3,
                         obs_shape=(obs_dim,), num_labels=num_labels)
        train = TrainConfig(
            steps=5000, batch_size=132, learning_rate=5e-4, seed=seed,
            objective=ObjectiveConfig(lambda_sparsity=0.01, beta_pred=10.0),
        )
        return DefaultSetup(train, dims, "linear", "gaussian", 0.1)
    raise ValueError(f"unknown dataset kind {dataset_kind!r}")
