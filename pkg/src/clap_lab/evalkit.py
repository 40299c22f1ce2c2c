"""Quantitative checks of concept recovery and prediction quality.

The headline metric matches estimated core latents to ground-truth ones up
to permutation and per-dimension (signed) rescaling: absolute Pearson
correlations feed a maximum-weight assignment, and the mean matched
correlation (MCC) summarizes recovery. Over-parameterized models are not
penalized for dead extra dimensions because the mean runs over ground-truth
dims only. All metrics use posterior means, never samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import synthgen
from .model import CLAPModel
from .synthgen import GenerativeSpec, LabeledDataset


@dataclass
class AlignmentReport:
    """Match between estimated and ground-truth core dimensions.

    ``assignment[d]`` is the estimated dim matched to ground-truth dim d;
    ``matched_subset`` lists the used estimated dims in increasing order and
    ``scales`` the regression coefficient of each such estimated dim on its
    matched ground-truth dim (so sign flips show up as negative scales).
    ``per_dim_corr`` holds absolute correlations indexed by ground-truth dim.
    """

    assignment: np.ndarray
    matched_subset: list
    scales: np.ndarray
    per_dim_corr: np.ndarray
    mcc: float
    degenerate_estimated_dims: list

    @property
    def permutation(self) -> dict:
        """Map estimated dim -> ground-truth dim over the matched subset."""
        return {int(e): int(t) for t, e in enumerate(self.assignment)}

    def to_json_dict(self) -> dict:
        return {
            "mcc": self.mcc,
            "permutation": {str(e): t for e, t in self.permutation.items()},
            "scales": self.scales.tolist(),
            "per_dim_corr": self.per_dim_corr.tolist(),
            "matched_subset": self.matched_subset,
        }


def align_latents(z_hat: np.ndarray, z_true: np.ndarray) -> AlignmentReport:
    """Match m >= k estimated dims to k ground-truth dims by |correlation|."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    n, m = z_hat.shape
    k = z_true.shape[1]
    if n < 3 or z_true.shape[0] != n:
        raise ValueError("need matching arrays with at least 3 rows")
    if m < k:
        raise ValueError(f"need at least {k} estimated dims, got {m}")

    hc = z_hat - z_hat.mean(0)
    tc = z_true - z_true.mean(0)
    h_std = hc.std(0)
    t_std = tc.std(0)
    degenerate = [int(i) for i in np.nonzero(h_std == 0)[0]]
    h_safe = np.where(h_std == 0, 1.0, h_std)
    t_safe = np.where(t_std == 0, 1.0, t_std)
    corr = (tc / t_safe).T @ (hc / h_safe) / n          # (k, m)
    corr[:, h_std == 0] = 0.0
    corr[t_std == 0, :] = 0.0
    abs_corr = np.abs(corr)

    rows, cols = linear_sum_assignment(-abs_corr)
    assignment = np.empty(k, dtype=np.int64)
    assignment[rows] = cols
    per_dim = abs_corr[np.arange(k), assignment]

    matched = sorted(int(e) for e in assignment)
    scales = []
    for e in matched:
        t = int(np.nonzero(assignment == e)[0][0])
        denom = float(tc[:, t] @ tc[:, t])
        scales.append(float(hc[:, e] @ tc[:, t]) / denom if denom > 0 else 0.0)

    return AlignmentReport(
        assignment=assignment,
        matched_subset=matched,
        scales=np.asarray(scales),
        per_dim_corr=per_dim,
        mcc=float(per_dim.mean()),
        degenerate_estimated_dims=degenerate,
    )


def _batched_posteriors(model: CLAPModel, dataset: LabeledDataset,
                        batch: int = 1024):
    """Posterior means (prediction and concept branch) over a dataset."""
    was_training = model.training
    model.eval()
    means_p, means_cl = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch):
            x = torch.from_numpy(dataset.x[start:start + batch]).float()
            y = torch.from_numpy(dataset.y[start:start + batch].astype(np.float32))
            q_p, q_cl = model.encode_pair(x, y)
            means_p.append(q_p.mean.numpy())
            means_cl.append(q_cl.mean.numpy())
    if was_training:
        model.train()
    return np.concatenate(means_p), np.concatenate(means_cl)


def core_posterior_means(model: CLAPModel, dataset: LabeledDataset) -> np.ndarray:
    means_p, _ = _batched_posteriors(model, dataset)
    return means_p[:, :model.dims.k_c]


def alignment_from_model(model: CLAPModel, dataset: LabeledDataset) -> AlignmentReport:
    if not dataset.has_latents:
        raise ValueError("dataset has no ground-truth latents")
    return align_latents(core_posterior_means(model, dataset), dataset.z_core)


def posterior_agreement(model: CLAPModel, dataset: LabeledDataset) -> float:
    """RMS distance between the two encoders' core means, in pooled-std units.

    Per row, the root mean square over core dims of the mean difference is
    averaged over the dataset and divided by the pooled standard deviation
    of the prediction-branch core means (so a constant offset of 1 in every
    dim scores 1 / pooled_std).
    """
    means_p, means_cl = _batched_posteriors(model, dataset)
    k_c = model.dims.k_c
    diff = means_p[:, :k_c] - means_cl[:, :k_c]
    per_row = np.sqrt((diff ** 2).mean(axis=1))
    pooled_std = np.sqrt(means_p[:, :k_c].var(axis=0).mean())
    if pooled_std == 0:
        return 0.0 if np.allclose(diff, 0) else float("inf")
    return float(per_row.mean() / pooled_std)


def active_core_columns(model: CLAPModel, tol: float = 1e-2) -> list:
    """Core columns whose stacked (B; C) norm exceeds tol * max stacked norm."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    B = model.bottleneck.detach()
    C = model.classifier_C.detach()
    k_c = model.dims.k_c
    stacked = torch.cat([B[:, :k_c], C], dim=0)
    norms = torch.linalg.vector_norm(stacked, dim=0).numpy()
    cutoff = tol * norms.max()
    return [int(i) for i in np.nonzero(norms > cutoff)[0]]


def prediction_metrics(model: CLAPModel, dataset: LabeledDataset) -> dict:
    """Per-label and mean accuracy of the label-free prediction path."""
    was_training = model.training
    model.eval()
    correct = np.zeros(dataset.num_labels)
    with torch.no_grad():
        for start in range(0, len(dataset), 1024):
            x = torch.from_numpy(dataset.x[start:start + 1024]).float()
            q = model.encode_p(x)
            probs = model.classify(q.core_mean)
            pred = (probs >= 0.5).numpy().astype(np.uint8)
            correct += (pred == dataset.y[start:start + 1024]).sum(axis=0)
    if was_training:
        model.train()
    per_label = correct / len(dataset)
    return {"accuracy_per_label": per_label.tolist(),
            "mean_accuracy": float(per_label.mean())}


def bayes_optimal_accuracy(spec: GenerativeSpec, n: int, seed: int) -> float:
    """Per-label accuracy ceiling of the exact posterior, by Monte Carlo.

    Draws a fresh sample and predicts each label bit from the exact marginal
    posterior over the label space; returns the mean per-label accuracy (for
    a single binary label this is the usual joint Bayes accuracy).
    """
    data = synthgen.sample_dataset(spec, n, seed)
    log_ev = synthgen.log_evidence_all_labels(spec, data.x.astype(np.float64))
    log_joint = log_ev + np.log(np.maximum(spec.p_y, 1e-300))  # (n, |Y|)
    labels = np.asarray(spec.label_space)                      # (|Y|, L)
    correct = np.zeros(spec.num_labels)
    max_j = log_joint.max(axis=1, keepdims=True)
    w = np.exp(log_joint - max_j)
    for j in range(spec.num_labels):
        p1 = (w * (labels[:, j] == 1)).sum(axis=1)
        p0 = (w * (labels[:, j] == 0)).sum(axis=1)
        pred = (p1 > p0).astype(np.uint8)
        correct[j] = (pred == data.y[:, j]).mean()
    return float(correct.mean())


def evaluation_report(model: CLAPModel, dataset: LabeledDataset,
                      spec: GenerativeSpec | None = None,
                      bayes_n: int = 4096, seed: int = 0) -> dict:
    """Full evaluation bundle; alignment keys appear iff latents are present."""
    report: dict = {}
    if dataset.has_latents:
        report.update(alignment_from_model(model, dataset).to_json_dict())
    report["posterior_agreement"] = posterior_agreement(model, dataset)
    report["active_core_columns"] = active_core_columns(model)
    report.update(prediction_metrics(model, dataset))
    if spec is not None:
        try:
            report["bayes_accuracy"] = bayes_optimal_accuracy(spec, bayes_n, seed)
        except synthgen.UnsupportedOracleError:
            pass
    return report
