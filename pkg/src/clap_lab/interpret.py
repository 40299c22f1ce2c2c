"""Human-facing outputs: latent traversal strips and prediction weights.

A traversal fixes an input's posterior mean and sweeps one core dimension
across +/- 2 empirical posterior standard deviations (7 frames by default,
middle frame untouched), decoding each point. Global weights are the linear
classifier rows; local weights are the per-dimension summands of the logit
for a specific input, so they sum (plus bias) to the logit exactly.

``render_report`` writes one PNG grid per inspected instance (rows are the
traversed dims, columns the steps) and a ``report.json`` whose entries carry
the weights plus empty ``concept_labels`` slots for a human to fill in, via
``annotate_report`` or the CLI.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .evalkit import active_core_columns
from .model import CLAPModel
from .synthgen import LabeledDataset


class UnsupportedClassifierError(RuntimeError):
    """Weight reports are only defined for the linear classifier."""


@dataclass
class TraversalConfig:
    dims: list | None = None       # None = active core columns
    steps: int = 7
    span_stds: float = 2.0         # half-range in posterior-mean std units
    span_override: dict = field(default_factory=dict)   # dim -> absolute half-range

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.span_stds < 0 or any(v < 0 for v in self.span_override.values()):
            raise ValueError("spans must be nonnegative")


@dataclass
class TraversalResult:
    dims: list
    values: dict          # dim -> (steps,) latent values swept
    frames: dict          # dim -> (steps, *obs_shape) decoded outputs
    base_latent: np.ndarray
    reconstruction: np.ndarray


def posterior_mean_stats(model: CLAPModel, dataset: LabeledDataset,
                         batch: int = 1024):
    """Mean and std of the label-free posterior means over a dataset."""
    was_training = model.training
    model.eval()
    means = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch):
            x = torch.from_numpy(dataset.x[start:start + batch]).float()
            means.append(model.encode_p(x).mean.numpy())
    if was_training:
        model.train()
    means = np.concatenate(means)
    return means.mean(axis=0), means.std(axis=0)


def traverse(model: CLAPModel, x: np.ndarray, config: TraversalConfig,
             latent_std: np.ndarray) -> TraversalResult:
    """Decode sweeps of selected core dims around the input's posterior mean."""
    dims = config.dims if config.dims is not None else active_core_columns(model)
    if not dims:
        raise ValueError("no dimensions selected for traversal")
    if any(not 0 <= d < model.dims.k_c for d in dims):
        raise ValueError("traversal dims must be core dims")

    was_training = model.training
    model.eval()
    with torch.no_grad():
        xt = torch.from_numpy(np.asarray(x, dtype=np.float32)[None])
        mu = model.encode_p(xt).mean[0]
        recon = model.decode(mu[None])[0].numpy()
        values, frames = {}, {}
        for d in dims:
            half = config.span_override.get(d, config.span_stds * float(latent_std[d]))
            vals = np.linspace(float(mu[d]) - half, float(mu[d]) + half, config.steps)
            if config.steps % 2 == 1:
                vals[config.steps // 2] = float(mu[d])   # middle frame untouched
            z = mu.repeat(config.steps, 1)
            z[:, d] = torch.from_numpy(vals).float()
            frames[d] = model.decode(z).numpy()
            values[d] = vals
    if was_training:
        model.train()
    return TraversalResult(dims=list(dims), values=values, frames=frames,
                           base_latent=mu.numpy(), reconstruction=recon)


def global_weights(model: CLAPModel) -> dict:
    """Per-label classifier weight vectors over the core dims."""
    if model.psi_prime is not None:
        raise UnsupportedClassifierError(
            "global weights are undefined for a nonlinear classifier head")
    w = model.classifier_C.detach().numpy()
    return {int(l): w[l].copy() for l in range(model.dims.num_labels)}


def local_weights(model: CLAPModel, x: np.ndarray) -> dict:
    """Per-label summands of the logit for one input: mu(x)_c * psi."""
    if model.psi_prime is not None:
        raise UnsupportedClassifierError(
            "local weights are undefined for a nonlinear classifier head")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        xt = torch.from_numpy(np.asarray(x, dtype=np.float32)[None])
        mu_c = model.encode_p(xt).core_mean[0].numpy()
    if was_training:
        model.train()
    w = model.classifier_C.detach().numpy()
    return {int(l): (mu_c * w[l]).copy() for l in range(model.dims.num_labels)}


def _to_uint8(frame: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scale = hi - lo if hi > lo else 1.0
    arr = np.clip((frame - lo) / scale, 0.0, 1.0)
    return np.round(arr * 255).astype(np.uint8)


def _frame_tile(frame: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """8-bit RGB tile for one decoded frame (images pass through; vectors
    become a grayscale column strip)."""
    if frame.ndim == 3 and frame.shape[-1] == 3:
        return _to_uint8(frame, 0.0, 1.0)
    col = _to_uint8(frame.reshape(-1, 1), lo, hi)
    tile = np.repeat(col, 8, axis=1)
    return np.repeat(tile[:, :, None], 3, axis=2)


def traversal_grid_image(result: TraversalResult) -> Image.Image:
    """Stack the strips into one grid: rows = dims, columns = steps."""
    all_vals = np.concatenate([result.frames[d].ravel() for d in result.dims])
    lo, hi = float(all_vals.min()), float(all_vals.max())
    rows = []
    pad = 2
    for d in result.dims:
        tiles = [_frame_tile(f, lo, hi) for f in result.frames[d]]
        h, w, _ = tiles[0].shape
        strip = np.zeros((h, len(tiles) * (w + pad) - pad, 3), dtype=np.uint8)
        for i, t in enumerate(tiles):
            strip[:, i * (w + pad):i * (w + pad) + w] = t
        rows.append(strip)
    h, w, _ = rows[0].shape
    grid = np.zeros((len(rows) * (h + pad) - pad, w, 3), dtype=np.uint8)
    for i, r in enumerate(rows):
        grid[i * (h + pad):i * (h + pad) + h] = r
    return Image.fromarray(grid)


def difference_heatmap(result: TraversalResult, dim: int) -> Image.Image:
    """Optional per-strip heatmap: |frame - middle frame| averaged over channels."""
    frames = result.frames[dim]
    mid = frames[len(frames) // 2]
    diffs = [np.abs(f - mid).reshape(*f.shape[:2], -1).mean(-1)
             if f.ndim == 3 else np.abs(f - mid).reshape(-1, 1) for f in frames]
    hi = max(float(d.max()) for d in diffs) or 1.0
    tiles = [np.repeat(_to_uint8(d, 0.0, hi)[:, :, None], 3, axis=2) for d in diffs]
    strip = np.concatenate(tiles, axis=1)
    return Image.fromarray(strip)


def render_report(model: CLAPModel, dataset: LabeledDataset, out_dir,
                  instances=(0,), config: TraversalConfig | None = None,
                  with_diff_heatmaps: bool = False) -> dict:
    """Write traversal grids and report.json; returns the report content."""
    if len(dataset) < 1:
        raise ValueError("need at least one sample")
    config = config or TraversalConfig()
    os.makedirs(out_dir, exist_ok=True)
    _, std = posterior_mean_stats(model, dataset)
    gw = {str(l): w.tolist() for l, w in global_weights(model).items()}
    active = active_core_columns(model)
    entries = []
    for idx in instances:
        x = dataset.x[idx]
        result = traverse(model, x, config, std)
        grid = traversal_grid_image(result)
        grid_name = f"instance_{idx:05d}_traversal.png"
        grid.save(os.path.join(out_dir, grid_name))
        if with_diff_heatmaps:
            for d in result.dims:
                difference_heatmap(result, d).save(
                    os.path.join(out_dir, f"instance_{idx:05d}_dim_{d}_diff.png"))
        lw = {str(l): w.tolist() for l, w in local_weights(model, x).items()}
        entries.append({
            "instance_id": int(idx),
            "global_weights": gw,
            "local_weights": lw,
            "active_dims": active,
            "concept_labels": {str(d): None for d in result.dims},
            "traversal_image": grid_name,
        })
    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
    return entries


def annotate_report(report_path, dim: int, label: str) -> None:
    """Fill a concept label slot in every report entry; unknown dim raises."""
    with open(report_path) as f:
        entries = json.load(f)
    key = str(dim)
    if not entries or any(key not in e["concept_labels"] for e in entries):
        raise KeyError(f"dimension {dim} is not inspected in this report")
    for e in entries:
        e["concept_labels"][key] = label
    with open(report_path, "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
