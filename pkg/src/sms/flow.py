"""Conditional normalizing flow over patch score-norm vectors.

Affine coupling blocks transform one contiguous half of the dims with a
scale/shift computed from the other half plus the conditioning vector;
consecutive blocks flip halves.  Log-scales are tanh-clamped so the
forward map is bijective for any parameters, and every inverse is exact
algebra.  The base density is a Gaussian mixture whose weights, means and
(bounded) log-stds are a linear map of the conditioning vector.  A fixed
per-dim affine whitening of the inputs, fitted on training rows, sits in
front of the blocks and contributes its own log-det so densities stay
properly normalized.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .features import ContextEncoder, FeatureDataset
from .optim import adam_step
from .scorenet import TrainConfig, TrainResult, TrainState, TrainingDiverged

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOGSTD_BOUND = 5.0


class FlowNumericsError(RuntimeError):
    pass


class CouplingBlock:
    """One conditional affine coupling layer.

    `masked_first` selects which contiguous half passes through unchanged:
    dims [0:k) when True, dims [k:L) when False, with k = ceil(L/2).
    """

    def __init__(self, dim, ctx_dim, hidden=64, masked_first=True, c_max=3.0, seed=0):
        self.dim = int(dim)
        self.ctx_dim = int(ctx_dim)
        self.k = (dim + 1) // 2
        self.masked_first = bool(masked_first)
        self.c_max = float(c_max)
        self.n_masked = self.k if masked_first else dim - self.k
        self.n_free = dim - self.n_masked
        rng = np.random.default_rng(seed)
        n_in = self.n_masked + ctx_dim
        self.params = {
            "w1": ad.Tensor(rng.standard_normal((n_in, hidden)) / np.sqrt(n_in), requires_grad=True),
            "b1": ad.Tensor(np.zeros(hidden), requires_grad=True),
            "w2": ad.Tensor(rng.standard_normal((hidden, hidden)) / np.sqrt(hidden), requires_grad=True),
            "b2": ad.Tensor(np.zeros(hidden), requires_grad=True),
            # zero-init head: the block starts as the identity map
            "w3": ad.Tensor(np.zeros((hidden, 2 * self.n_free)), requires_grad=True),
            "b3": ad.Tensor(np.zeros(2 * self.n_free), requires_grad=True),
        }

    def _split(self, v):
        if self.masked_first:
            return v[:, : self.k], v[:, self.k :]
        return v[:, self.k :], v[:, : self.k]

    def _join(self, kept, moved):
        parts = [kept, moved] if self.masked_first else [moved, kept]
        return ad.concat(parts, axis=1)

    def _scale_shift(self, kept, ctx):
        h = ad.concat([kept, ctx], axis=1)
        p = self.params
        h = ad.tanh(ad.matmul(h, p["w1"]) + p["b1"])
        h = ad.tanh(ad.matmul(h, p["w2"]) + p["b2"])
        out = ad.matmul(h, p["w3"]) + p["b3"]
        s = ad.tanh(out[:, : self.n_free] / self.c_max) * self.c_max
        t = out[:, self.n_free :]
        return s, t

    def forward(self, v, ctx):
        """(v, ctx) -> (out, logdet [N])."""
        kept, free = self._split(v)
        if self.n_free == 0:
            return v, ad.Tensor(np.zeros(v.shape[0]))
        s, t = self._scale_shift(kept, ctx)
        moved = free * ad.exp(s) + t
        return self._join(kept, moved), ad.sum(s, axis=1)

    def inverse(self, u, ctx):
        """Exact algebraic inverse on raw arrays."""
        with ad.no_grad():
            kept, moved = self._split(ad.Tensor(u))
            if self.n_free == 0:
                return np.asarray(u, dtype=np.float64)
            s, t = self._scale_shift(kept, ad.as_tensor(ctx))
            free = (moved.data - t.data) * np.exp(-s.data)
            kept_d = kept.data
        if self.masked_first:
            return np.concatenate([kept_d, free], axis=1)
        return np.concatenate([free, kept_d], axis=1)


class ConditionalGMM:
    """Diagonal Gaussian mixture with context-dependent parameters.

    A single linear map sends the conditioning vector to component logits,
    means, and bounded log-stds.
    """

    def __init__(self, dim, ctx_dim, n_components=5, seed=0):
        self.dim = int(dim)
        self.ctx_dim = int(ctx_dim)
        self.k = int(n_components)
        rng = np.random.default_rng(seed)
        n_out = self.k * (1 + 2 * self.dim)
        bias = np.zeros(n_out)
        # spread the component means so gradient training can break symmetry
        bias[self.k : self.k + self.k * self.dim] = rng.standard_normal(self.k * self.dim) * 0.5
        self.params = {
            "W": ad.Tensor(rng.standard_normal((ctx_dim, n_out)) * 0.01, requires_grad=True),
            "b": ad.Tensor(bias, requires_grad=True),
        }

    def log_prob(self, u, ctx):
        """Mixture log-density of u [N,L] given ctx [N,C]; returns [N]."""
        u = ad.as_tensor(u)
        ctx = ad.as_tensor(ctx)
        n = u.shape[0]
        k, d = self.k, self.dim
        theta = ad.matmul(ctx, self.params["W"]) + self.params["b"]
        logits = theta[:, :k]
        means = ad.reshape(theta[:, k : k + k * d], (n, k, d))
        logstd = ad.tanh(theta[:, k + k * d :] / _LOGSTD_BOUND) * _LOGSTD_BOUND
        logstd = ad.reshape(logstd, (n, k, d))
        logw = logits - ad.logsumexp(logits, axis=1, keepdims=True)
        z = (ad.reshape(u, (n, 1, d)) - means) * ad.exp(-logstd)
        comp = ad.sum(ad.square(z), axis=2) * -0.5 - ad.sum(logstd, axis=2) - 0.5 * d * _LOG_2PI
        return ad.logsumexp(logw + comp, axis=1)


class FlowModel:
    """Whitening, coupling blocks, conditional GMM base, encoder reference."""

    def __init__(self, dim, ctx_dim, n_blocks=6, hidden=64, n_components=5, c_max=3.0,
                 encoder: ContextEncoder | None = None, seed=0):
        self.dim = int(dim)
        self.ctx_dim = int(ctx_dim)
        self.n_blocks = int(n_blocks)
        self.hidden = int(hidden)
        self.c_max = float(c_max)
        self.blocks = [
            CouplingBlock(dim, ctx_dim, hidden=hidden, masked_first=(i % 2 == 0), c_max=c_max, seed=seed * 1000 + i)
            for i in range(n_blocks)
        ]
        self.gmm = ConditionalGMM(dim, ctx_dim, n_components=n_components, seed=seed * 1000 + n_blocks)
        self.encoder = encoder
        self.whiten_mu = np.zeros(dim)
        self.whiten_std = np.ones(dim)
        self.uses_positional = True

    # -- whitening -----------------------------------------------------------
    def fit_whitening(self, rows):
        rows = np.asarray(rows, dtype=np.float64)
        self.whiten_mu = rows.mean(axis=0)
        self.whiten_std = np.maximum(rows.std(axis=0), 1e-6)

    @property
    def _whiten_logdet(self):
        return float(-np.log(self.whiten_std).sum())

    # -- core maps ------------------------------------------------------------
    def forward_t(self, v, ctx):
        """Whiten then compose all blocks; returns (u, logdet) Tensors [N]."""
        v = ad.as_tensor(v)
        ctx = ad.as_tensor(ctx)
        u = (v - ad.Tensor(self.whiten_mu)) / ad.Tensor(self.whiten_std)
        logdet = ad.Tensor(np.full(v.shape[0], self._whiten_logdet))
        for i, block in enumerate(self.blocks):
            u, ld = block.forward(u, ctx)
            if not np.all(np.isfinite(u.data)):
                raise FlowNumericsError(f"non-finite value leaving coupling block {i}")
            logdet = logdet + ld
        return u, logdet

    def log_likelihood_t(self, v, ctx):
        u, logdet = self.forward_t(v, ctx)
        return self.gmm.log_prob(u, ctx) + logdet

    def inverse(self, u, ctx):
        """Exact inverse of forward_t on raw arrays (unwhitens at the end)."""
        u = np.asarray(u, dtype=np.float64)
        ctx = np.asarray(ctx, dtype=np.float64)
        for block in reversed(self.blocks):
            u = block.inverse(u, ctx)
        return u * self.whiten_std + self.whiten_mu

    # -- parameters / persistence ------------------------------------------------
    def params(self, include_encoder=True):
        out = {}
        for i, block in enumerate(self.blocks):
            for k, t in block.params.items():
                out[f"block{i}.{k}"] = t
        for k, t in self.gmm.params.items():
            out[f"gmm.{k}"] = t
        if include_encoder and self.encoder is not None:
            for k, t in self.encoder.params.items():
                out[f"encoder.{k}"] = t
        return out

    def set_params(self, params):
        for i, block in enumerate(self.blocks):
            for k in block.params:
                block.params[k] = params[f"block{i}.{k}"]
        for k in self.gmm.params:
            self.gmm.params[k] = params[f"gmm.{k}"]
        if self.encoder is not None:
            for k in self.encoder.params:
                key = f"encoder.{k}"
                if key in params:
                    self.encoder.params[k] = params[key]

    def to_arrays(self):
        arrays = {k: t.data for k, t in self.params(include_encoder=True).items()}
        arrays["whiten.mu"] = self.whiten_mu
        arrays["whiten.std"] = self.whiten_std
        return arrays

    def meta(self):
        m = {
            "dim": self.dim,
            "ctx_dim": self.ctx_dim,
            "n_blocks": self.n_blocks,
            "hidden": self.hidden,
            "c_max": self.c_max,
            "n_components": self.gmm.k,
            "uses_positional": self.uses_positional,
            "masks": [[1] * b.k + [0] * (self.dim - b.k) if b.masked_first else [0] * b.k + [1] * (self.dim - b.k) for b in self.blocks],
        }
        if self.encoder is not None:
            m["encoder"] = self.encoder.meta()
        return m

    @classmethod
    def from_arrays(cls, arrays, meta):
        encoder = None
        if "encoder" in meta:
            enc_arrays = {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
            encoder = ContextEncoder.from_arrays(enc_arrays, meta["encoder"])
        model = cls(
            meta["dim"], meta["ctx_dim"], n_blocks=meta["n_blocks"], hidden=meta["hidden"],
            n_components=meta["n_components"], c_max=meta["c_max"], encoder=encoder,
        )
        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("whiten.")}
        model.set_params(tensors)
        model.whiten_mu = arrays["whiten.mu"]
        model.whiten_std = arrays["whiten.std"]
        model.uses_positional = bool(meta.get("uses_positional", True))
        return model


# -- functional surface over raw arrays --------------------------------------------


def _rows2d(v, dim):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    out = v[None] if single else v
    if out.shape[1] != dim:
        raise ad.ShapeError(f"expected vectors of dim {dim}, got shape {v.shape}")
    return out, single


def flow_forward(model: FlowModel, v, ctx):
    """(latent u, accumulated log|det J|) for raw arrays."""
    v2, single = _rows2d(v, model.dim)
    c2, _ = _rows2d(ctx, model.ctx_dim)
    with ad.no_grad():
        u, logdet = model.forward_t(v2, c2)
    if single:
        return u.data[0], float(logdet.data[0])
    return u.data, logdet.data


def flow_inverse(model: FlowModel, u, ctx):
    u2, single = _rows2d(u, model.dim)
    c2, _ = _rows2d(ctx, model.ctx_dim)
    out = model.inverse(u2, c2)
    return out[0] if single else out


def log_likelihood(model: FlowModel, v, ctx):
    """Exact conditional log-density via change of variables."""
    v2, single = _rows2d(v, model.dim)
    c2, _ = _rows2d(ctx, model.ctx_dim)
    with ad.no_grad():
        ll = model.log_likelihood_t(v2, c2)
    return float(ll.data[0]) if single else ll.data


def gmm_log_prob(gmm: ConditionalGMM, u, ctx):
    u2, single = _rows2d(u, gmm.dim)
    c2, _ = _rows2d(ctx, gmm.ctx_dim)
    with ad.no_grad():
        lp = gmm.log_prob(u2, c2)
    return float(lp.data[0]) if single else lp.data


# -- training -------------------------------------------------------------------


def _context_rows(dataset: FeatureDataset, img_idx, encoder, use_positional, row_idx):
    """Conditioning tensor for the rows of the chosen images (grads flow)."""
    g = dataset.patches_per_image
    h = encoder.forward(dataset.images[img_idx])
    expanded = ad.reshape(h, (len(img_idx), 1, encoder.d_ctx)) + ad.Tensor(
        np.zeros((len(img_idx), g, encoder.d_ctx))
    )
    h_rows = ad.reshape(expanded, (len(img_idx) * g, encoder.d_ctx))
    pos = dataset.pos[row_idx] if use_positional else np.zeros_like(dataset.pos[row_idx])
    return ad.concat([ad.Tensor(pos), h_rows], axis=1)


def train_flow(dataset: FeatureDataset, model: FlowModel, config: TrainConfig,
               batch_images=8, use_positional=True, state=None,
               snapshot_fn=None, snapshot_every=0):
    """Joint MLE training of coupling blocks, GMM map and context encoder.

    Positional encodings stay fixed throughout; with use_positional=False
    the positional block is zeroed (spatial-conditioning ablation) and the
    model remembers that choice for inference.
    """
    if model.encoder is None:
        raise ValueError("flow model needs an attached context encoder for training")
    model.uses_positional = bool(use_positional)
    if state is None:
        state = TrainState()
        model.fit_whitening(dataset.norms)
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    n_img = dataset.n_images
    params = model.params(include_encoder=True)
    for it in range(state.iteration, config.iterations):
        img_idx = rng.integers(0, n_img, size=min(batch_images, n_img))
        row_idx = dataset.rows_for_images(img_idx)
        ctx = _context_rows(dataset, img_idx, model.encoder, use_positional, row_idx)
        ll = model.log_likelihood_t(ad.Tensor(dataset.norms[row_idx]), ctx)
        loss = -ad.mean(ll)
        value = float(loss.data)
        if not np.isfinite(value) or value > 1e6:
            raise TrainingDiverged(f"flow training diverged at iteration {it}: loss={value}")
        grads = ad.backward(loss, params)
        params = adam_step(params, grads, state.adam, config.lr)
        model.set_params(params)
        state.losses.append(value)
        state.iteration = it + 1
        state.rng_state = rng.bit_generator.state
        if snapshot_fn and snapshot_every and state.iteration % snapshot_every == 0:
            snapshot_fn(model, state)
    state.rng_state = rng.bit_generator.state
    return TrainResult(model=model, losses=list(state.losses), state=state)


def mean_nll(model: FlowModel, dataset: FeatureDataset, use_positional=None):
    """Mean negative log-likelihood of every row under a frozen model."""
    if use_positional is None:
        use_positional = model.uses_positional
    with ad.no_grad():
        ctx_img = model.encoder.forward(dataset.images).data
    ctx_rows = np.repeat(ctx_img, dataset.patches_per_image, axis=0)
    pos = dataset.pos if use_positional else np.zeros_like(dataset.pos)
    ctx = np.concatenate([pos, ctx_rows], axis=1)
    return float(-log_likelihood(model, dataset.norms, ctx).mean())
