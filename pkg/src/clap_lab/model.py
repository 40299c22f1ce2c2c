"""Dual-encoder VAE with a shared structured decoder and a simple classifier.

The model holds five parameter groups:

* prediction-branch encoder (input x, no labels) -> diagonal Gaussian over
  all k latents,
* concept-branch encoder (input x and y); its style posterior reuses the
  prediction branch's backbone and style head, so the style blocks of the
  two posteriors coincide exactly, while the core head is separate and sees
  the label at its final fully connected stage,
* decoder applied as ``f_prime(B @ z)`` with a trainable k x k bottleneck B,
  shared verbatim by both branches,
* linear multi-label classifier ``logits = C @ z_core + bias`` reading only
  the core block (an optional small nonlinear head can replace the identity),
* two priors: a label-indexed Gaussian mixture over all latents for the
  prediction branch, and per-label diagonal core Gaussians with a fixed
  standard-normal style prior for the concept branch.

Checkpoints are zip archives with a ``params.json`` manifest plus one raw
little-endian float32 blob per parameter path; writing is deterministic so
identical models serialize to identical bytes.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

VAR_FLOOR = 1e-6
_LOG_WEIGHT_FLOOR = -690.0  # log of ~1e-300, representable in float32

CHECKPOINT_FORMAT_VERSION = 1


class DimMismatchError(ValueError):
    """Checkpoint or input shapes disagree with the declared dimensions."""


@dataclass(frozen=True)
class ModelDims:
    """Latent and observation dimensions of the model."""

    k_c: int
    k_s: int
    obs_shape: tuple
    num_labels: int

    def __post_init__(self):
        if self.k_c < 1 or self.k_s < 0:
            raise ValueError("need k_c >= 1 and k_s >= 0")
        if self.num_labels < 1:
            raise ValueError("need at least one label")
        object.__setattr__(self, "obs_shape", tuple(int(s) for s in self.obs_shape))

    @property
    def k(self) -> int:
        return self.k_c + self.k_s

    @property
    def obs_dim(self) -> int:
        return int(np.prod(self.obs_shape))


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the k latents; first k_c dims are the core block."""

    mean: torch.Tensor   # (batch, k)
    var: torch.Tensor    # (batch, k), strictly positive
    k_c: int

    @property
    def core_mean(self) -> torch.Tensor:
        return self.mean[:, :self.k_c]

    @property
    def style_mean(self) -> torch.Tensor:
        return self.mean[:, self.k_c:]

    @property
    def core_var(self) -> torch.Tensor:
        return self.var[:, :self.k_c]

    @property
    def style_var(self) -> torch.Tensor:
        return self.var[:, self.k_c:]

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        """log q(z) per row, summed over dims."""
        return (-0.5 * (torch.log(2 * math.pi * self.var)
                        + (z - self.mean) ** 2 / self.var)).sum(-1)


def sample_posterior(q: GaussianPosterior, seed) -> torch.Tensor:
    """Reparameterized draw ``mean + sqrt(var) * eps``, deterministic in seed.

    ``seed`` may be an int or a torch.Generator; gradients flow through the
    posterior parameters.
    """
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator()
        gen.manual_seed(int(seed))
    eps = torch.randn(q.mean.shape, generator=gen, dtype=q.mean.dtype,
                      device=q.mean.device)
    return q.mean + torch.sqrt(q.var) * eps


def _raw_var_init_bias() -> float:
    # softplus(bias) == 1.0 so fresh posteriors start near unit variance
    return math.log(math.e - 1.0)


class _VectorBackbone(nn.Module):
    def __init__(self, obs_dim, hidden):
        super().__init__()
        self.flatten = nn.Flatten()
        if hidden is None:
            self.body = nn.Identity()
            self.out_dim = obs_dim
        else:
            self.body = nn.Sequential(nn.Linear(obs_dim, hidden), nn.Tanh())
            self.out_dim = hidden

    def forward(self, x):
        return self.body(self.flatten(x))


class _ConvBackbone(nn.Module):
    """Four stride-2 conv blocks with LeakyReLU(0.01) and channel dropout."""

    def __init__(self, in_channels):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(4):
            layers += [nn.Conv2d(c, 64, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.01), nn.Dropout2d(0.1)]
            c = 64
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(64 * 4 * 4, 256)
        self.out_dim = 256

    def forward(self, x):
        # accepts (batch, H, W, C) and moves channels first
        if x.ndim != 4:
            raise DimMismatchError("convolutional backbone expects image batches")
        h = self.conv(x.permute(0, 3, 1, 2))
        return self.fc(h.flatten(1))


class _ConvDecoder(nn.Module):
    def __init__(self, out_channels):
        super().__init__()
        self.fc = None  # set lazily to k by the owner
        self.body = nn.Sequential(
            nn.ReLU(),
            nn.Linear(512, 1024),
            _Reshape(64, 4, 4),
            nn.ConvTranspose2d(64, 64, 3, stride=2, padding=0),
            nn.ReLU(),
            nn.ConvTranspose2d(64, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(64, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(64, out_channels, 4, stride=2, padding=2),
        )

    def forward(self, h):
        out = self.body(self.fc(h))
        return out.permute(0, 2, 3, 1)


class _Reshape(nn.Module):
    def __init__(self, *shape):
        super().__init__()
        self.shape = shape

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


class CLAPModel(nn.Module):
    """All trainable parameters plus the forward maps between them.

    Presets:

    * ``linear`` - affine encoders/decoder straight on flattened inputs,
    * ``mlp``    - one tanh hidden layer (``hidden`` units) in each backbone
      and in the decoder,
    * ``table2`` - the convolutional image architecture (64x64 inputs, four
      stride-2 conv blocks with dropout; mirrored transposed-conv decoder).

    ``likelihood`` is ``gaussian`` (fixed ``sigma``) or ``bernoulli``.
    Parameter initialization is fully determined by ``init_seed``.
    """

    def __init__(self, dims: ModelDims, preset: str = "mlp",
                 likelihood: str = "gaussian", sigma: float = 0.1,
                 hidden: int = 128, psi_hidden: int | None = None,
                 init_seed: int = 0):
        super().__init__()
        if preset not in ("linear", "mlp", "table2"):
            raise ValueError(f"unknown preset {preset!r}")
        if likelihood not in ("gaussian", "bernoulli"):
            raise ValueError(f"unknown likelihood {likelihood!r}")
        if likelihood == "gaussian" and sigma <= 0:
            raise ValueError("gaussian likelihood needs sigma > 0")
        self.dims = dims
        self.preset = preset
        self.likelihood = likelihood
        self.sigma = float(sigma)
        self.hidden = int(hidden)
        self.psi_hidden = psi_hidden
        self.init_seed = int(init_seed)

        k, k_c, k_s = dims.k, dims.k_c, dims.k_s
        if preset == "table2":
            if len(dims.obs_shape) != 3 or dims.obs_shape[:2] != (64, 64):
                raise DimMismatchError("table2 preset expects 64x64 image inputs")
            channels = dims.obs_shape[2]
            self.backbone_p = _ConvBackbone(channels)
            self.backbone_cl = _ConvBackbone(channels)
            self.f_prime = _ConvDecoder(channels)
            self.f_prime.fc = nn.Linear(k, 512)
        else:
            h = None if preset == "linear" else self.hidden
            self.backbone_p = _VectorBackbone(dims.obs_dim, h)
            self.backbone_cl = _VectorBackbone(dims.obs_dim, h)
            if preset == "linear":
                self.f_prime = nn.Linear(k, dims.obs_dim)
            else:
                self.f_prime = nn.Sequential(
                    nn.Linear(k, self.hidden), nn.Tanh(),
                    nn.Linear(self.hidden, dims.obs_dim))

        feat = self.backbone_p.out_dim
        self.head_core_p = nn.Linear(feat, 2 * k_c)
        self.head_style = nn.Linear(feat, 2 * k_s) if k_s > 0 else None
        self.head_core_cl = nn.Linear(feat + dims.num_labels, 2 * k_c)

        self.bottleneck = nn.Parameter(torch.eye(k))

        if psi_hidden is None:
            self.classifier_C = nn.Parameter(torch.zeros(dims.num_labels, k_c))
            self.psi_prime = None
        else:
            self.classifier_C = nn.Parameter(torch.zeros(k_c, k_c))
            self.psi_prime = nn.Sequential(
                nn.Linear(k_c, psi_hidden), nn.Tanh(),
                nn.Linear(psi_hidden, dims.num_labels))
        self.classifier_bias = nn.Parameter(torch.zeros(dims.num_labels))

        n_comp = 2 ** dims.num_labels
        self.prior_p_core_means = nn.Parameter(torch.zeros(n_comp, k_c))
        self.prior_p_core_logvars = nn.Parameter(torch.zeros(n_comp, k_c))
        self.prior_p_style_mean = nn.Parameter(torch.zeros(k_s))
        self.prior_p_style_logvar = nn.Parameter(torch.zeros(k_s))
        self.prior_cl_core_means = nn.Parameter(torch.zeros(n_comp, k_c))
        self.prior_cl_core_logvars = nn.Parameter(torch.zeros(n_comp, k_c))
        self.register_buffer(
            "mixture_logweights",
            torch.full((n_comp,), -math.log(n_comp)))
        self.register_buffer(
            "_label_weights",
            torch.tensor([2 ** (dims.num_labels - 1 - j)
                          for j in range(dims.num_labels)], dtype=torch.long))

        self._reset_parameters()

    # -- initialization ----------------------------------------------------

    def _reset_parameters(self):
        gen = torch.Generator()
        gen.manual_seed(self.init_seed)
        for name, p in self.named_parameters():
            if name == "bottleneck":
                with torch.no_grad():
                    p.copy_(torch.eye(self.dims.k))
            elif name in ("classifier_C", "classifier_bias"):
                with torch.no_grad():
                    p.zero_()
            elif "core_means" in name:
                # near zero: dead dims keep both branches' posteriors anchored
                # together; the small noise still breaks mixture symmetry
                with torch.no_grad():
                    p.copy_(0.01 * torch.randn(p.shape, generator=gen))
            elif name.startswith("prior_"):
                with torch.no_grad():
                    p.zero_()
            elif p.ndim >= 2:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.ndim > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    p.uniform_(-bound, bound, generator=gen)
            else:
                with torch.no_grad():
                    p.zero_()
        # encoder heads: bias the raw-variance half so softplus(bias) == 1
        with torch.no_grad():
            for head in (self.head_core_p, self.head_style, self.head_core_cl):
                if head is None:
                    continue
                half = head.bias.shape[0] // 2
                head.bias[half:] = _raw_var_init_bias()
            # core posterior means start near zero: the style path claims
            # reconstruction first, so core slots are recruited by predictive
            # and concept-prior pressure rather than by generic variance
            for head in (self.head_core_p, self.head_core_cl):
                head.weight[:self.dims.k_c] *= 0.1

    # -- encoders ----------------------------------------------------------

    def _check_x(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.dims.obs_shape:
            raise DimMismatchError(
                f"input shape {tuple(x.shape[1:])} != {self.dims.obs_shape}")
        return x

    def _check_y(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.dims.num_labels:
            raise DimMismatchError(
                f"label width {y.shape[-1]} != {self.dims.num_labels}")
        yf = y.to(self.bottleneck.dtype)
        if not torch.isin(yf, torch.tensor([0.0, 1.0], dtype=yf.dtype)).all():
            raise ValueError("label vectors must be binary")
        return yf

    def _posterior_from_heads(self, core_out, style_out) -> GaussianPosterior:
        mc, rc = core_out.chunk(2, dim=-1)
        if style_out is not None:
            ms, rs = style_out.chunk(2, dim=-1)
            mean = torch.cat([mc, ms], dim=-1)
            raw = torch.cat([rc, rs], dim=-1)
        else:
            mean, raw = mc, rc
        return GaussianPosterior(mean, F.softplus(raw) + VAR_FLOOR, self.dims.k_c)

    def encode_p(self, x: torch.Tensor) -> GaussianPosterior:
        """Label-free posterior over all k latents (usable at test time)."""
        h = self.backbone_p(self._check_x(x))
        style = self.head_style(h) if self.head_style is not None else None
        return self._posterior_from_heads(self.head_core_p(h), style)

    def encode_cl(self, x: torch.Tensor, y: torch.Tensor) -> GaussianPosterior:
        """Label-conditioned posterior; style block tied to encode_p."""
        _, q_cl = self.encode_pair(x, y)
        return q_cl

    def encode_pair(self, x: torch.Tensor, y: torch.Tensor):
        """Both posteriors with a single shared-backbone evaluation.

        The prediction backbone (and therefore any dropout mask inside it)
        runs once and feeds the style head of both branches.
        """
        x = self._check_x(x)
        yf = self._check_y(y)
        h_p = self.backbone_p(x)
        style = self.head_style(h_p) if self.head_style is not None else None
        q_p = self._posterior_from_heads(self.head_core_p(h_p), style)
        h_cl = self.backbone_cl(x)
        core_cl = self.head_core_cl(torch.cat([h_cl, yf], dim=-1))
        q_cl = self._posterior_from_heads(core_cl, style)
        return q_p, q_cl

    # -- decoder and classifier ---------------------------------------------

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        """Pre-squash decoder output (logits for Bernoulli, mean for Gaussian)."""
        if not torch.isfinite(z).all():
            raise ValueError("latent input contains non-finite values")
        if z.shape[-1] != self.dims.k:
            raise DimMismatchError(f"latent width {z.shape[-1]} != {self.dims.k}")
        h = z @ self.bottleneck.T
        out = self.f_prime(h)
        if self.preset != "table2":
            out = out.reshape(z.shape[0], *self.dims.obs_shape)
        return out

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Likelihood parameters: Bernoulli probabilities or Gaussian mean."""
        out = self.decode_raw(z)
        if self.likelihood == "bernoulli":
            out = torch.sigmoid(out)
        return out

    def log_likelihood(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """log p(x | z) per row, summed over observation dims."""
        raw = self.decode_raw(z)
        flat_x = x.reshape(x.shape[0], -1)
        flat_r = raw.reshape(raw.shape[0], -1)
        if self.likelihood == "bernoulli":
            return -F.binary_cross_entropy_with_logits(
                flat_r, flat_x, reduction="none").sum(-1)
        var = self.sigma ** 2
        return (-0.5 * (math.log(2 * math.pi * var)
                        + (flat_x - flat_r) ** 2 / var)).sum(-1)

    def classify_logits(self, z_c: torch.Tensor) -> torch.Tensor:
        if z_c.shape[-1] != self.dims.k_c:
            raise DimMismatchError(f"core width {z_c.shape[-1]} != {self.dims.k_c}")
        h = z_c @ self.classifier_C.T
        if self.psi_prime is not None:
            h = self.psi_prime(h)
        return h + self.classifier_bias

    def classify(self, z_c: torch.Tensor) -> torch.Tensor:
        """Independent per-label Bernoulli probabilities."""
        return torch.sigmoid(self.classify_logits(z_c))

    def label_log_prob(self, z_c: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """log p(y | z_core) per row, summed over labels."""
        yf = self._check_y(y)
        logits = self.classify_logits(z_c)
        return -F.binary_cross_entropy_with_logits(
            logits, yf, reduction="none").sum(-1)

    # -- priors --------------------------------------------------------------

    def label_index(self, y: torch.Tensor) -> torch.Tensor:
        return (y.long() * self._label_weights).sum(-1)

    def prior_cl_params(self, y: torch.Tensor):
        """Concept-branch core prior (mean, var) for each row's label."""
        idx = self.label_index(y)
        return (self.prior_cl_core_means[idx],
                torch.exp(self.prior_cl_core_logvars[idx]))

    def prior_p_component_params(self):
        """Mixture component means/vars, style block shared across components."""
        n_comp = self.prior_p_core_means.shape[0]
        style_mean = self.prior_p_style_mean.expand(n_comp, -1)
        style_var = torch.exp(self.prior_p_style_logvar).expand(n_comp, -1)
        means = torch.cat([self.prior_p_core_means, style_mean], dim=-1)
        varis = torch.cat([torch.exp(self.prior_p_core_logvars), style_var], dim=-1)
        return means, varis

    def prior_p_log_density(self, z: torch.Tensor) -> torch.Tensor:
        """Gaussian-mixture log density of z under the prediction prior."""
        means, varis = self.prior_p_component_params()
        diff = z.unsqueeze(1) - means.unsqueeze(0)           # (b, comp, k)
        log_comp = (-0.5 * (torch.log(2 * math.pi * varis) + diff ** 2 / varis)
                    ).sum(-1)                                # (b, comp)
        return torch.logsumexp(self.mixture_logweights + log_comp, dim=-1)

    def set_mixture_weights(self, probs) -> None:
        """Tie the mixture weights to a label distribution estimate."""
        p = torch.as_tensor(probs, dtype=self.mixture_logweights.dtype)
        if p.shape != self.mixture_logweights.shape:
            raise DimMismatchError("mixture weight vector has the wrong length")
        logw = torch.log(p.clamp_min(1e-300)).clamp_min(_LOG_WEIGHT_FLOOR)
        with torch.no_grad():
            self.mixture_logweights.copy_(logw)

    def empirical_label_weights(self, y: np.ndarray | torch.Tensor) -> torch.Tensor:
        y = torch.as_tensor(np.asarray(y))
        idx = self.label_index(y)
        counts = torch.bincount(idx, minlength=self.mixture_logweights.shape[0])
        return counts.double() / counts.sum()

    # -- bookkeeping ----------------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "k_c": self.dims.k_c,
            "k_s": self.dims.k_s,
            "obs_shape": list(self.dims.obs_shape),
            "num_labels": self.dims.num_labels,
            "preset": self.preset,
            "likelihood": self.likelihood,
            "sigma": self.sigma,
            "hidden": self.hidden,
            "psi_hidden": self.psi_hidden,
            "init_seed": self.init_seed,
        }


def build_model(config: dict) -> CLAPModel:
    dims = ModelDims(
        k_c=int(config["k_c"]),
        k_s=int(config["k_s"]),
        obs_shape=tuple(config["obs_shape"]),
        num_labels=int(config["num_labels"]),
    )
    return CLAPModel(
        dims,
        preset=config.get("preset", "mlp"),
        likelihood=config.get("likelihood", "gaussian"),
        sigma=float(config.get("sigma", 0.1)),
        hidden=int(config.get("hidden", 128)),
        psi_hidden=config.get("psi_hidden"),
        init_seed=int(config.get("init_seed", 0)),
    )


def save_checkpoint(model: CLAPModel, path) -> None:
    """Write a deterministic zip archive of the parameters."""
    state = model.state_dict()
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": model.config_dict(),
        "params": {name: list(t.shape) for name, t in state.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("params.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))
        for name in sorted(state):
            blob = state[name].detach().cpu().to(torch.float32).numpy()
            blob = np.ascontiguousarray(blob, dtype="<f4")
            info = zipfile.ZipInfo(name + ".f32", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, blob.tobytes())


def load_checkpoint(path) -> CLAPModel:
    """Rebuild a model from a checkpoint, validating the shape manifest."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("params.json"))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DimMismatchError("unknown checkpoint format version")
        model = build_model(manifest["model"])
        state = model.state_dict()
        declared = manifest["params"]
        if set(declared) != set(state):
            raise DimMismatchError("checkpoint parameter set does not match model")
        new_state = {}
        for name, t in state.items():
            shape = tuple(declared[name])
            if shape != tuple(t.shape):
                raise DimMismatchError(
                    f"{name}: declared shape {shape} != model shape {tuple(t.shape)}")
            raw = zf.read(name + ".f32")
            expect = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if len(raw) != expect:
                raise DimMismatchError(f"{name}: blob size does not match shape")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            new_state[name] = torch.from_numpy(arr.copy()).to(t.dtype)
        model.load_state_dict(new_state)
    return model
