"""Synthetic data with known ground truth for concept-learning experiments.

The generative process: a label vector Y is drawn from a finite label space,
core latents are drawn from a per-label diagonal Gaussian, style latents from
a label-independent Gaussian, and the observation is a fixed mixing function
of the concatenated latents plus isotropic Gaussian noise:

    X = f(Z) + eps,   Z = (Z_core, Z_style),
    Z_core | Y=y ~ N(mu_y, diag(d_y)),   Z_style ~ N(mu_s, G).

Everything downstream (training, alignment metrics, Bayes oracles) measures
against the parameters stored in :class:`GenerativeSpec`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

LATENT_RANGE = 3.0  # toy image renderer accepts latents in [-3, 3]


class InvalidSpecError(ValueError):
    """The generative spec violates a structural requirement."""


class UnsupportedOracleError(RuntimeError):
    """Exact evidence is not tractable for this spec."""


# ---------------------------------------------------------------------------
# Mixing functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearMixing:
    """x = M z for a fixed matrix M (obs_dim x latent_dim)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise InvalidSpecError("linear mixing matrix must be 2-d")
        object.__setattr__(self, "matrix", m)

    @property
    def latent_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def obs_shape(self) -> tuple:
        return (self.matrix.shape[0],)

    def apply(self, z: np.ndarray) -> np.ndarray:
        return z @ self.matrix.T

    def full_column_rank(self) -> bool:
        return np.linalg.matrix_rank(self.matrix) == self.matrix.shape[1]

    def to_json_dict(self) -> dict:
        return {"kind": "linear", "matrix": self.matrix.tolist()}


@dataclass(frozen=True)
class InvertibleMLPMixing:
    """Square MLP made invertible by construction.

    Each hidden layer is ``h -> act(W h + b)`` with square invertible ``W``
    and the strictly increasing smooth activation ``u + alpha * tanh(u)``
    (0 < alpha < 1 keeps the derivative positive). The final layer is affine.
    """

    weights: tuple
    biases: tuple
    alpha: float = 0.5

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.asarray(b, dtype=np.float64) for b in self.biases)
        if len(ws) != len(bs) or not ws:
            raise InvalidSpecError("need one bias per weight matrix")
        d = ws[0].shape[0]
        for w in ws:
            if w.shape != (d, d):
                raise InvalidSpecError("all MLP mixing layers must be square")
            if abs(np.linalg.det(w)) < 1e-12:
                raise InvalidSpecError("MLP mixing layer is singular")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidSpecError("alpha must lie in (0, 1)")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def latent_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def obs_shape(self) -> tuple:
        return (self.latent_dim,)

    def apply(self, z: np.ndarray) -> np.ndarray:
        h = np.asarray(z, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = h + self.alpha * np.tanh(h)
        return h

    def to_json_dict(self) -> dict:
        return {
            "kind": "mlp",
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "alpha": self.alpha,
        }


def make_invertible_mlp(latent_dim: int, n_layers: int = 2, seed: int = 0,
                        alpha: float = 0.5) -> InvertibleMLPMixing:
    """Random invertible square MLP with well-conditioned layers."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for _ in range(n_layers):
        q, _ = np.linalg.qr(rng.standard_normal((latent_dim, latent_dim)))
        scales = rng.uniform(0.7, 1.4, size=latent_dim)
        weights.append(q * scales)
        biases.append(rng.uniform(-0.3, 0.3, size=latent_dim))
    return InvertibleMLPMixing(tuple(weights), tuple(biases), alpha)


IMAGE_SIZE = 64


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, continuous in h on [0, 1)."""
    h = np.asarray(h, dtype=np.float64)
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    v = np.broadcast_to(v, h.shape)
    p = np.broadcast_to(p, h.shape)
    choices = [
        (v, t, p), (q, v, p), (p, v, t),
        (p, q, v), (t, p, v), (v, p, q),
    ]
    r = np.select([i == k for k in range(6)], [c[0] for c in choices])
    g = np.select([i == k for k in range(6)], [c[1] for c in choices])
    b = np.select([i == k for k in range(6)], [c[2] for c in choices])
    return np.stack([r, g, b], axis=-1)


@dataclass(frozen=True)
class ToyImageMixing:
    """Parametric renderer mapping latents to 64x64x3 images in [0, 1].

    Latent semantics (fixed so pixel-level tests are stable):

    * core[0]  object hue      (hue 0.83 * u, u = (z+3)/6)
    * core[1]  object size     (superellipse radius 0.10 + 0.14 * u)
    * core[2]  shape roundness (superellipse exponent 0.8 + 3.2 * u)
    * style[0] background hue  (hue 0.83 * u; fixed 0.58 when absent)
    * style[1] position jitter (center offset along a diagonal; 0 when absent)

    Requires exactly 3 core dims and at most 2 style dims. The object edge
    uses a smoothstep over a fixed band, so the map is continuous in every
    latent, pixels strictly inside the object are exactly the object color,
    and pixels outside the band are exactly the background color. Latents
    outside [-3, 3] are clamped (callers are told via the returned metadata).
    """

    k_core: int = 3
    k_style: int = 2

    def __post_init__(self):
        if self.k_core != 3:
            raise InvalidSpecError("toy image renderer needs exactly 3 core dims")
        if not 0 <= self.k_style <= 2:
            raise InvalidSpecError("toy image renderer supports at most 2 style dims")

    @property
    def latent_dim(self) -> int:
        return self.k_core + self.k_style

    @property
    def obs_shape(self) -> tuple:
        return (IMAGE_SIZE, IMAGE_SIZE, 3)

    def apply(self, z: np.ndarray) -> np.ndarray:
        return self.render(z)[0]

    def render(self, z: np.ndarray):
        """Render a latent batch; returns (images, metadata).

        metadata["clamped"] marks rows with any latent outside [-3, 3].
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.latent_dim:
            raise InvalidSpecError(
                f"renderer expects latent dim {self.latent_dim}, got {z.shape[1]}")
        clamped = np.any(np.abs(z) > LATENT_RANGE, axis=1)
        u = (np.clip(z, -LATENT_RANGE, LATENT_RANGE) + LATENT_RANGE) / (2 * LATENT_RANGE)

        hue_obj = 0.83 * u[:, 0]
        radius = 0.10 + 0.14 * u[:, 1]
        pexp = 0.8 + 3.2 * u[:, 2]
        hue_bg = 0.83 * u[:, 3] if self.k_style >= 1 else np.full(len(z), 0.58 * 0.83)
        t_pos = 2.0 * u[:, 4] - 1.0 if self.k_style >= 2 else np.zeros(len(z))
        cx = 0.5 + 0.15 * t_pos
        cy = 0.5 - 0.10 * t_pos

        coords = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
        px, py = np.meshgrid(coords, coords, indexing="xy")
        px = px[None]  # (1, H, W)
        py = py[None]

        r = radius[:, None, None]
        p = pexp[:, None, None]
        dx = np.abs(px - cx[:, None, None]) / r
        dy = np.abs(py - cy[:, None, None]) / r
        d = (dx ** p + dy ** p) ** (1.0 / p)
        t = np.clip((1.0 - d) / 0.25, 0.0, 1.0)
        alpha = t * t * (3.0 - 2.0 * t)

        obj = _hsv_to_rgb(hue_obj, 0.85, 0.95)[:, None, None, :]
        bg = _hsv_to_rgb(hue_bg, 0.55, 0.35)[:, None, None, :]
        img = alpha[..., None] * obj + (1.0 - alpha[..., None]) * bg
        return img.astype(np.float32), {"clamped": clamped}

    def object_mask(self, z: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        """Boolean mask of pixels whose object coverage exceeds ``threshold``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        u = (np.clip(z, -LATENT_RANGE, LATENT_RANGE) + LATENT_RANGE) / (2 * LATENT_RANGE)
        radius = 0.10 + 0.14 * u[:, 1]
        pexp = 0.8 + 3.2 * u[:, 2]
        t_pos = 2.0 * u[:, 4] - 1.0 if self.k_style >= 2 else np.zeros(len(z))
        cx = 0.5 + 0.15 * t_pos
        cy = 0.5 - 0.10 * t_pos
        coords = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
        px, py = np.meshgrid(coords, coords, indexing="xy")
        dx = np.abs(px[None] - cx[:, None, None]) / radius[:, None, None]
        dy = np.abs(py[None] - cy[:, None, None]) / radius[:, None, None]
        d = (dx ** pexp[:, None, None] + dy ** pexp[:, None, None]) ** (1.0 / pexp[:, None, None])
        t = np.clip((1.0 - d) / 0.25, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t) > threshold

    def to_json_dict(self) -> dict:
        return {"kind": "toy_image", "k_core": self.k_core, "k_style": self.k_style}


def mixing_from_json_dict(d: dict):
    kind = d.get("kind")
    if kind == "linear":
        return LinearMixing(np.asarray(d["matrix"], dtype=np.float64))
    if kind == "mlp":
        return InvertibleMLPMixing(
            tuple(np.asarray(w, dtype=np.float64) for w in d["weights"]),
            tuple(np.asarray(b, dtype=np.float64) for b in d["biases"]),
            float(d.get("alpha", 0.5)),
        )
    if kind == "toy_image":
        return ToyImageMixing(int(d.get("k_core", 3)), int(d.get("k_style", 2)))
    raise InvalidSpecError(f"unknown mixing kind: {kind!r}")


# ---------------------------------------------------------------------------
# Generative spec
# ---------------------------------------------------------------------------


def full_binary_label_space(num_labels: int) -> tuple:
    """All binary label vectors of the given length, lexicographic order."""
    if num_labels < 1:
        raise InvalidSpecError("need at least one label")
    return tuple(
        tuple((i >> (num_labels - 1 - j)) & 1 for j in range(num_labels))
        for i in range(2 ** num_labels)
    )


@dataclass(frozen=True)
class GenerativeSpec:
    """Ground-truth parameters of the synthetic generative process."""

    k_core_true: int
    k_style_true: int
    label_space: tuple            # tuple of binary tuples
    p_y: np.ndarray               # pmf aligned with label_space
    core_means: dict              # label tuple -> (k_core_true,)
    core_vars: dict               # label tuple -> (k_core_true,) positive
    style_mean: np.ndarray        # (k_style_true,)
    style_cov: np.ndarray         # (k_style_true, k_style_true) symmetric PD
    mixing: object                # LinearMixing | InvertibleMLPMixing | ToyImageMixing
    noise_std: float = 0.0

    def __post_init__(self):
        if self.k_core_true < 1 or self.k_style_true < 0:
            raise InvalidSpecError("latent dims must be k_core >= 1, k_style >= 0")
        labels = tuple(tuple(int(b) for b in y) for y in self.label_space)
        if not labels:
            raise InvalidSpecError("label space is empty")
        if len(set(labels)) != len(labels):
            raise InvalidSpecError("label space has duplicates")
        num_labels = len(labels[0])
        for y in labels:
            if len(y) != num_labels or any(b not in (0, 1) for b in y):
                raise InvalidSpecError(f"label vector {y!r} is not binary")
        p = np.asarray(self.p_y, dtype=np.float64)
        if p.shape != (len(labels),) or np.any(p < 0) or not math.isclose(
                p.sum(), 1.0, abs_tol=1e-9):
            raise InvalidSpecError("p_y must be a pmf over the label space")
        means = {}
        varis = {}
        for y in labels:
            if y not in self.core_means or y not in self.core_vars:
                raise InvalidSpecError(f"missing core parameters for label {y!r}")
            m = np.asarray(self.core_means[y], dtype=np.float64)
            v = np.asarray(self.core_vars[y], dtype=np.float64)
            if m.shape != (self.k_core_true,) or v.shape != (self.k_core_true,):
                raise InvalidSpecError(f"core parameter shape mismatch for {y!r}")
            if np.any(v <= 0):
                raise InvalidSpecError(f"core variances must be positive for {y!r}")
            means[y] = m
            varis[y] = v
        sm = np.asarray(self.style_mean, dtype=np.float64)
        sc = np.asarray(self.style_cov, dtype=np.float64)
        if sm.shape != (self.k_style_true,) or sc.shape != (self.k_style_true,) * 2:
            raise InvalidSpecError("style parameter shape mismatch")
        if self.k_style_true > 0:
            if not np.allclose(sc, sc.T, atol=1e-12):
                raise InvalidSpecError("style covariance must be symmetric")
            try:
                np.linalg.cholesky(sc)
            except np.linalg.LinAlgError:
                raise InvalidSpecError("style covariance must be positive definite")
        if self.noise_std < 0:
            raise InvalidSpecError("noise_std must be nonnegative")
        if self.mixing.latent_dim != self.k_core_true + self.k_style_true:
            raise InvalidSpecError("mixing latent dim does not match k_core + k_style")
        object.__setattr__(self, "label_space", labels)
        object.__setattr__(self, "p_y", p)
        object.__setattr__(self, "core_means", means)
        object.__setattr__(self, "core_vars", varis)
        object.__setattr__(self, "style_mean", sm)
        object.__setattr__(self, "style_cov", sc)

    @property
    def num_labels(self) -> int:
        return len(self.label_space[0])

    @property
    def latent_dim(self) -> int:
        return self.k_core_true + self.k_style_true

    @property
    def obs_shape(self) -> tuple:
        return self.mixing.obs_shape

    @property
    def obs_dim(self) -> int:
        return int(np.prod(self.obs_shape))

    def latent_mean_cov(self, y) -> tuple:
        """Mean and covariance of the full latent vector given label y."""
        y = tuple(int(b) for b in y)
        mean = np.concatenate([self.core_means[y], self.style_mean])
        cov = np.zeros((self.latent_dim, self.latent_dim))
        kc = self.k_core_true
        cov[:kc, :kc] = np.diag(self.core_vars[y])
        cov[kc:, kc:] = self.style_cov
        return mean, cov

    def to_json_dict(self) -> dict:
        key = lambda y: "".join(str(b) for b in y)
        return {
            "k_core_true": self.k_core_true,
            "k_style_true": self.k_style_true,
            "label_space": [list(y) for y in self.label_space],
            "p_y": self.p_y.tolist(),
            "core_means": {key(y): self.core_means[y].tolist() for y in self.label_space},
            "core_vars": {key(y): self.core_vars[y].tolist() for y in self.label_space},
            "style_mean": self.style_mean.tolist(),
            "style_cov": self.style_cov.tolist(),
            "mixing": self.mixing.to_json_dict(),
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GenerativeSpec":
        labels = tuple(tuple(int(b) for b in y) for y in d["label_space"])
        parse = lambda m: {tuple(int(c) for c in k): np.asarray(v, dtype=np.float64)
                           for k, v in m.items()}
        return cls(
            k_core_true=int(d["k_core_true"]),
            k_style_true=int(d["k_style_true"]),
            label_space=labels,
            p_y=np.asarray(d["p_y"], dtype=np.float64),
            core_means=parse(d["core_means"]),
            core_vars=parse(d["core_vars"]),
            style_mean=np.asarray(d["style_mean"], dtype=np.float64),
            style_cov=np.asarray(d["style_cov"], dtype=np.float64),
            mixing=mixing_from_json_dict(d["mixing"]),
            noise_std=float(d["noise_std"]),
        )

    def sha256(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def uniform_pmf(label_space) -> np.ndarray:
    return np.full(len(label_space), 1.0 / len(label_space))


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    """Pass/fail record for the identifiability conditions of a spec."""

    heterogeneity_pass: bool
    heterogeneity_witness: tuple | None      # (y, y_tilde) with distinct ratios
    heterogeneity_relaxed_pass: bool
    mixing_injective_pass: bool | None       # None when not checkable (non-linear)
    mixing_detail: str

    def summary_lines(self) -> list:
        lines = []
        if self.mixing_injective_pass is None:
            lines.append(f"ASSUMPTION_1.1: SKIP ({self.mixing_detail})")
        else:
            lines.append("ASSUMPTION_1.1: " + ("PASS" if self.mixing_injective_pass else "FAIL")
                         + f" ({self.mixing_detail})")
        if self.heterogeneity_pass:
            lines.append(f"ASSUMPTION_1.2: PASS (witness {self.heterogeneity_witness})")
        else:
            lines.append("ASSUMPTION_1.2: FAIL")
        lines.append("ASSUMPTION_1.2_RELAXED: "
                     + ("PASS" if self.heterogeneity_relaxed_pass else "FAIL"))
        return lines


_RATIO_RTOL = 1e-9


def _pair_ratio_ok(var_a: np.ndarray, var_b: np.ndarray) -> bool:
    """True when var_a / var_b has pairwise-distinct entries, none equal to 1.

    Comparisons run in log space so the check is exactly symmetric under
    swapping the pair (ratios invert, logs negate).
    """
    logr = np.log(var_a) - np.log(var_b)
    if np.any(np.abs(logr) <= _RATIO_RTOL):
        return False
    diffs = np.abs(logr[:, None] - logr[None, :])
    iu = np.triu_indices(len(logr), k=1)
    return bool(np.all(diffs[iu] > _RATIO_RTOL))


def validate_assumptions(spec: GenerativeSpec) -> AssumptionReport:
    """Check variance heterogeneity across label pairs and mixing injectivity."""
    if not spec.label_space:
        raise InvalidSpecError("label space is empty")

    witness = None
    labels = spec.label_space
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            if _pair_ratio_ok(spec.core_vars[labels[a]], spec.core_vars[labels[b]]):
                witness = (labels[a], labels[b])
                break
        if witness:
            break

    # Relaxed variant: per index pair (i, j) some label pair separates them.
    kc = spec.k_core_true
    relaxed = True
    for i in range(kc):
        for j in range(i + 1, kc):
            found = False
            for a in range(len(labels)):
                for b in range(len(labels)):
                    if a == b:
                        continue
                    logr = (np.log(spec.core_vars[labels[a]])
                            - np.log(spec.core_vars[labels[b]]))
                    if (abs(logr[i] - logr[j]) > _RATIO_RTOL
                            and abs(logr[i]) > _RATIO_RTOL
                            and abs(logr[j]) > _RATIO_RTOL):
                        found = True
                        break
                if found:
                    break
            if not found:
                relaxed = False
    if kc == 1:
        # single core dim: only the "not equal to one" part is required
        relaxed = any(
            np.abs(np.log(spec.core_vars[labels[a]]) - np.log(spec.core_vars[labels[b]]))[0]
            > _RATIO_RTOL
            for a in range(len(labels)) for b in range(len(labels)) if a != b
        )

    if isinstance(spec.mixing, LinearMixing):
        ok = spec.mixing.full_column_rank()
        detail = "linear mixing full column rank" if ok else "linear mixing is rank deficient"
        inj = ok
    elif isinstance(spec.mixing, InvertibleMLPMixing):
        inj = True
        detail = "square MLP invertible by construction"
    else:
        inj = None
        detail = "renderer injectivity asserted on the supported latent range"

    return AssumptionReport(
        heterogeneity_pass=witness is not None,
        heterogeneity_witness=witness,
        heterogeneity_relaxed_pass=relaxed,
        mixing_injective_pass=inj,
        mixing_detail=detail,
    )


# ---------------------------------------------------------------------------
# Dataset container and on-disk format
# ---------------------------------------------------------------------------

_ARRAY_FILES = {
    "x": ("x.f32", "<f4"),
    "y": ("y.u8", "u1"),
    "z_core": ("z_core.f32", "<f4"),
    "z_style": ("z_style.f32", "<f4"),
}


@dataclass
class LabeledDataset:
    """Observations, binary labels, and (for synthetic data) true latents."""

    x: np.ndarray
    y: np.ndarray
    z_core: np.ndarray | None = None
    z_style: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y.shape[0] != n:
            raise ValueError("x and y disagree on the number of rows")
        if not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be binary")
        for z in (self.z_core, self.z_style):
            if z is not None and z.shape[0] != n:
                raise ValueError("latent arrays disagree on the number of rows")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_labels(self) -> int:
        return self.y.shape[1]

    @property
    def obs_shape(self) -> tuple:
        return self.x.shape[1:]

    @property
    def has_latents(self) -> bool:
        return self.z_core is not None

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        arrays = {"x": self.x, "y": self.y}
        if self.z_core is not None:
            arrays["z_core"] = self.z_core
        if self.z_style is not None:
            arrays["z_style"] = self.z_style
        manifest = dict(self.manifest)
        manifest["byte_order"] = "little"
        manifest["layout"] = "row-major"
        manifest["arrays"] = {}
        for name, arr in arrays.items():
            fname, dtype = _ARRAY_FILES[name]
            data = np.ascontiguousarray(arr).astype(dtype)
            with open(os.path.join(directory, fname), "wb") as f:
                f.write(data.tobytes())
            manifest["arrays"][name] = {"file": fname, "dtype": dtype,
                                        "shape": list(arr.shape)}
        with open(os.path.join(directory, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "LabeledDataset":
        with open(os.path.join(directory, "manifest.json")) as f:
            manifest = json.load(f)
        arrays = {}
        for name, meta in manifest["arrays"].items():
            path = os.path.join(directory, meta["file"])
            raw = np.fromfile(path, dtype=meta["dtype"])
            arrays[name] = raw.reshape(meta["shape"])
        return cls(
            x=arrays["x"],
            y=arrays["y"],
            z_core=arrays.get("z_core"),
            z_style=arrays.get("z_style"),
            manifest=manifest,
        )


def sample_dataset(spec: GenerativeSpec, n: int, seed: int) -> LabeledDataset:
    """Draw n rows from the generative process, deterministically in seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.asarray(spec.label_space, dtype=np.int64)
    idx = rng.choice(len(labels), size=n, p=spec.p_y)
    y = labels[idx].astype(np.uint8)

    means = np.stack([spec.core_means[t] for t in spec.label_space])[idx]
    stds = np.sqrt(np.stack([spec.core_vars[t] for t in spec.label_space]))[idx]
    z_core = means + stds * rng.standard_normal((n, spec.k_core_true))

    if spec.k_style_true > 0:
        chol = np.linalg.cholesky(spec.style_cov)
        z_style = spec.style_mean + rng.standard_normal((n, spec.k_style_true)) @ chol.T
    else:
        z_style = np.zeros((n, 0))

    z = np.concatenate([z_core, z_style], axis=1)
    x = spec.mixing.apply(z)
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.standard_normal(x.shape)
        if isinstance(spec.mixing, ToyImageMixing):
            x = np.clip(x, 0.0, 1.0)  # keep pixel targets valid for Bernoulli decoding

    manifest = {
        "n": n,
        "seed": seed,
        "spec_sha256": spec.sha256(),
        "obs_shape": list(spec.obs_shape),
        "num_labels": spec.num_labels,
        "k_core_true": spec.k_core_true,
        "k_style_true": spec.k_style_true,
    }
    return LabeledDataset(
        x=x.astype(np.float32),
        y=y,
        z_core=z_core.astype(np.float32),
        z_style=z_style.astype(np.float32),
        manifest=manifest,
    )


def render_toy_images(z: np.ndarray, spec: GenerativeSpec):
    """Render latents through the spec's toy image mixing; see ToyImageMixing."""
    if not isinstance(spec.mixing, ToyImageMixing):
        raise InvalidSpecError("spec does not use the toy image renderer")
    return spec.mixing.render(z)


# ---------------------------------------------------------------------------
# Exact evidence oracles
# ---------------------------------------------------------------------------


def _linear_evidence_params(spec: GenerativeSpec, y) -> tuple:
    mean, cov = spec.latent_mean_cov(y)
    m = spec.mixing.matrix
    obs_mean = m @ mean
    obs_cov = m @ cov @ m.T + spec.noise_std ** 2 * np.eye(m.shape[0])
    return obs_mean, obs_cov


def exact_log_evidence(spec: GenerativeSpec, x: np.ndarray, y) -> float | np.ndarray:
    """log p(x | y) under the spec.

    Linear mixing with noise is evaluated in closed form via the Gaussian
    marginal; otherwise, for up to 2 latent/observation dims, adaptive
    quadrature integrates the latent out (absolute tolerance 1e-6).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(spec.obs_shape)
    if isinstance(spec.mixing, LinearMixing) and spec.noise_std > 0:
        obs_mean, obs_cov = _linear_evidence_params(spec, y)
        out = stats.multivariate_normal.logpdf(x, mean=obs_mean, cov=obs_cov)
        return float(out) if single else np.atleast_1d(out)

    if spec.obs_dim <= 2 and spec.latent_dim <= 2 and spec.noise_std > 0:
        xs = x[None] if single else x
        out = np.array([_quadrature_log_evidence(spec, xi, y) for xi in xs])
        return float(out[0]) if single else out

    raise UnsupportedOracleError(
        "exact evidence needs linear mixing with noise, or <= 2 latent and "
        "observation dims with noise for the quadrature fallback")


def _quadrature_log_evidence(spec: GenerativeSpec, x: np.ndarray, y) -> float:
    mean, cov = spec.latent_mean_cov(y)
    noise_var = spec.noise_std ** 2
    k = spec.latent_dim
    d = spec.obs_dim
    x = np.asarray(x, dtype=np.float64).reshape(d)
    norm_const = -0.5 * d * math.log(2 * math.pi * noise_var)

    if k == 1:
        sd = math.sqrt(cov[0, 0])
        lo, hi = mean[0] - 10 * sd, mean[0] + 10 * sd

        def integrand(z):
            fz = spec.mixing.apply(np.array([[z]]))[0]
            return (math.exp(-0.5 * np.sum((x - fz) ** 2) / noise_var)
                    * stats.norm.pdf(z, mean[0], sd))

        val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-10, limit=400)
    else:
        sds = np.sqrt(np.diag(cov))
        prior = stats.multivariate_normal(mean=mean, cov=cov)

        def integrand(z1, z0):
            fz = spec.mixing.apply(np.array([[z0, z1]]))[0]
            return (math.exp(-0.5 * np.sum((x - fz) ** 2) / noise_var)
                    * prior.pdf([z0, z1]))

        val, _ = integrate.dblquad(
            integrand,
            mean[0] - 8 * sds[0], mean[0] + 8 * sds[0],
            lambda _: mean[1] - 8 * sds[1], lambda _: mean[1] + 8 * sds[1],
            epsabs=1e-10,
        )
    if val <= 0:
        return -np.inf
    return math.log(val) + norm_const


def log_evidence_all_labels(spec: GenerativeSpec, x: np.ndarray) -> np.ndarray:
    """(n, |label space|) matrix of log p(x_i | y_j); linear specs only."""
    if not (isinstance(spec.mixing, LinearMixing) and spec.noise_std > 0):
        raise UnsupportedOracleError("vectorized evidence needs linear mixing with noise")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cols = []
    for y in spec.label_space:
        obs_mean, obs_cov = _linear_evidence_params(spec, y)
        cols.append(stats.multivariate_normal.logpdf(x, mean=obs_mean, cov=obs_cov))
    return np.stack([np.atleast_1d(c) for c in cols], axis=1)


# ---------------------------------------------------------------------------
# Ready-made specs used by the bundled experiments
# ---------------------------------------------------------------------------


def _per_bit_core_params(label_space, mean_lo, mean_hi, var_lo, var_hi):
    """Core dim i follows label bit i: mean/variance switch on that bit."""
    means, varis = {}, {}
    for y in label_space:
        means[y] = np.array([mean_hi[i] if y[i] else mean_lo[i] for i in range(len(y))])
        varis[y] = np.array([var_hi[i] if y[i] else var_lo[i] for i in range(len(y))])
    return means, varis


def demo_linear_spec(obs_dim: int = 20, noise_std: float = 0.01,
                     seed: int = 7) -> GenerativeSpec:
    """Linear-Gaussian spec: 3 core dims driven by 3 labels, 2 style dims.

    Heterogeneous per-label core variances satisfy the strict heterogeneity
    condition (witness: all-ones vs all-zeros label), and the mixing matrix
    has orthonormal columns with distinct scales, hence full column rank.
    """
    k_core, k_style = 3, 2
    labels = full_binary_label_space(3)
    means, varis = _per_bit_core_params(
        labels,
        mean_lo=(-1.5, -1.5, -1.5), mean_hi=(1.5, 1.5, 1.5),
        var_lo=(1.0, 1.1, 0.9), var_hi=(0.10, 0.30, 0.55),
    )
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((obs_dim, k_core + k_style)))
    matrix = q * np.linspace(1.0, 2.0, k_core + k_style)
    return GenerativeSpec(
        k_core_true=k_core,
        k_style_true=k_style,
        label_space=labels,
        p_y=uniform_pmf(labels),
        core_means=means,
        core_vars=varis,
        style_mean=np.array([0.3, -0.2]),
        style_cov=np.array([[0.6, 0.15], [0.15, 0.5]]),
        mixing=LinearMixing(matrix),
        noise_std=noise_std,
    )


def demo_toy_image_spec(noise_std: float = 0.0) -> GenerativeSpec:
    """Toy image spec: hue/size/roundness driven by 3 labels, 2 style dims."""
    labels = full_binary_label_space(3)
    means, varis = _per_bit_core_params(
        labels,
        mean_lo=(-1.3, -1.3, -1.3), mean_hi=(1.3, 1.3, 1.3),
        var_lo=(0.36, 0.36, 0.36), var_hi=(0.10, 0.16, 0.22),
    )
    return GenerativeSpec(
        k_core_true=3,
        k_style_true=2,
        label_space=labels,
        p_y=uniform_pmf(labels),
        core_means=means,
        core_vars=varis,
        style_mean=np.zeros(2),
        style_cov=np.array([[0.5, 0.1], [0.1, 0.4]]),
        mixing=ToyImageMixing(3, 2),
        noise_std=noise_std,
    )
