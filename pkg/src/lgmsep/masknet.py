"""Mask-estimation network and the mask-driven covariance model (DNN path).

The network maps a context window of log-magnitude / phase-difference
features to, per frame and frequency, a softmax over all mask categories
(speech per source, reverberation per source and tap, noise) and one
log-variance per source. Masks turn into spatial covariances by weighted
averaging of observed outer products; the resulting model is then used
exactly like the unsupervised one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from . import lgm
from ._linalg import TINY, hermitize, outer
from .lgm import GaussianPosterior, ScmParams
from .signal import MultichannelWave, Spectrogram, extract_features, feature_dim, istft

logger = logging.getLogger(__name__)

ACTIVATIONS = {"tanh": nn.Tanh, "relu": nn.ReLU}


@dataclass
class MaskNetConfig:
    n_freq: int = 129
    n_mics: int = 2
    n_sources: int = 2
    n_reverb: int = 1
    hidden: Tuple[int, ...] = (256, 256)
    context: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min((self.n_freq, self.n_mics, self.n_sources) + self.hidden) <= 0:
            raise ValueError("sizes must be positive")
        if self.n_reverb < 0 or self.context < 0:
            raise ValueError("n_reverb and context must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_masks(self) -> int:
        return self.n_sources * (1 + self.n_reverb) + 1

    @property
    def n_features(self) -> int:
        return feature_dim(self.n_freq, self.n_mics)

    @property
    def n_inputs(self) -> int:
        return self.n_features * (2 * self.context + 1)

    @property
    def n_outputs(self) -> int:
        return self.n_freq * (self.n_masks + self.n_sources)

    def to_dict(self) -> dict:
        return {
            "n_freq": self.n_freq,
            "n_mics": self.n_mics,
            "n_sources": self.n_sources,
            "n_reverb": self.n_reverb,
            "hidden": list(self.hidden),
            "context": self.context,
            "activation": self.activation,
        }


class MaskNet(nn.Module):
    """Feed-forward stack over a +-context frame window (float64)."""

    def __init__(self, cfg: MaskNetConfig, seed: int = 0, zero_output: bool = True):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        sizes = (cfg.n_inputs,) + cfg.hidden + (cfg.n_outputs,)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=torch.float64) for a, b in zip(sizes[:-1], sizes[1:])
        )
        self.act = ACTIVATIONS[cfg.activation]()
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()
            if zero_output:
                self.layers[-1].weight.zero_()

    def context_window(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, L, F) -> (B, L, (2c+1) F) with edge frames replicated."""
        c = self.cfg.context
        n_frames = feats.shape[1]
        idx = torch.arange(n_frames).unsqueeze(1) + torch.arange(-c, c + 1).unsqueeze(0)
        idx = idx.clamp(0, n_frames - 1)
        return feats[:, idx].flatten(2)

    def forward(self, feats: torch.Tensor):
        """Return mask logits (B, L, K, n_masks) and variance logits (B, L, K, S)."""
        h = self.context_window(feats)
        for n, layer in enumerate(self.layers):
            h = layer(h)
            if n < len(self.layers) - 1:
                h = self.act(h)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations at layer {n}")
        cfg = self.cfg
        h = h.reshape(h.shape[0], h.shape[1], cfg.n_freq, cfg.n_masks + cfg.n_sources)
        return h[..., : cfg.n_masks], h[..., cfg.n_masks :]

    def numpy_params(self) -> Dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_numpy_params(self, params: Dict[str, np.ndarray]):
        self.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in params.items()})


@dataclass
class MaskSet:
    """speech (S, L, K), reverb (S, L_r, L, K), noise (L, K); a simplex per bin."""

    speech: np.ndarray
    reverb: np.ndarray
    noise: np.ndarray

    def total(self) -> np.ndarray:
        return self.speech.sum(0) + self.reverb.sum((0, 1)) + self.noise


def split_masks(masks: torch.Tensor, n_sources: int, n_reverb: int):
    """(B, L, K, n_masks) -> speech (B,L,K,S), reverb (B,L,K,S,Lr), noise (B,L,K)."""
    speech = masks[..., :n_sources]
    reverb = masks[..., n_sources : n_sources * (1 + n_reverb)]
    reverb = reverb.reshape(masks.shape[:-1] + (n_sources, n_reverb))
    return speech, reverb, masks[..., -1]


def frequency_scale(spec: Spectrogram) -> np.ndarray:
    """Per-frequency mean power of the input; variance logits are relative to it."""
    return np.mean(np.abs(spec.bins) ** 2, axis=(0, 1)) + TINY


def net_forward(features, net: MaskNet, scale: Optional[np.ndarray] = None):
    """Masks and source variances for one utterance.

    ``features`` is a :class:`FeatureFrameSeq`; ``scale`` the per-frequency
    power of the input (defaults to ones). Returns ``(MaskSet, v_q)`` with
    ``v_q`` shaped (S, L, K).
    """
    cfg = net.cfg
    feats = torch.from_numpy(np.asarray(features.features, dtype=float))[None]
    if feats.shape[-1] != cfg.n_features:
        raise ValueError(f"feature width {feats.shape[-1]} != {cfg.n_features}")
    with torch.no_grad():
        mask_logits, var_logits = net(feats)
        masks = torch.softmax(mask_logits, dim=-1)
        speech, reverb, noise = split_masks(masks, cfg.n_sources, cfg.n_reverb)
    scale = np.ones(cfg.n_freq) if scale is None else np.asarray(scale, dtype=float)
    v = np.exp(var_logits[0].numpy()) * scale[None, :, None]
    mask_set = MaskSet(
        speech=np.transpose(speech[0].numpy(), (2, 0, 1)),
        reverb=np.transpose(reverb[0].numpy(), (2, 3, 0, 1)),
        noise=noise[0].numpy(),
    )
    return mask_set, np.transpose(v, (2, 0, 1))


def _weighted_mean(weights: np.ndarray, xx: np.ndarray, what: str) -> np.ndarray:
    """weights (L, K), xx (L, K, M, M) -> (K, M, M); uniform where a column sums to 0."""
    total = weights.sum(0)
    empty = total <= 0
    if np.any(empty):
        logger.warning("%s mask sums to zero at %d frequencies; using uniform weights", what, empty.sum())
        weights = weights.copy()
        weights[:, empty] = 1.0
        total = weights.sum(0)
    return hermitize(np.einsum("lk,lkab->kab", weights, xx) / total[:, None, None])


def masks_to_scm(spec: Spectrogram, masks: MaskSet, v_q: np.ndarray) -> ScmParams:
    x = np.transpose(spec.bins, (1, 2, 0))
    xx = outer(x)
    n_sources, n_reverb = masks.reverb.shape[:2]
    if masks.speech.shape[1:] != x.shape[:2] or v_q.shape != masks.speech.shape:
        raise ValueError("mask / spectrogram shapes disagree")
    R = np.stack([_weighted_mean(masks.speech[i], xx, "speech") for i in range(n_sources)])
    H = np.stack(
        [
            np.stack([_weighted_mean(masks.reverb[i, d], xx, "reverb") for d in range(n_reverb)])
            if n_reverb
            else np.zeros((0,) + R.shape[1:], dtype=complex)
            for i in range(n_sources)
        ]
    )
    Rn = _weighted_mean(masks.noise, xx, "noise")
    return ScmParams(np.array(v_q, dtype=float), R, H, Rn)


def dnn_posterior(spec: Spectrogram, phi: ScmParams) -> GaussianPosterior:
    return lgm.posterior(spec, phi)


def posterior_waves(spec: Spectrogram, post: GaussianPosterior) -> List[MultichannelWave]:
    """Resynthesize each source's multichannel posterior mean."""
    return [istft(spec.with_bins(np.transpose(mu, (2, 0, 1)), kind="source_image")) for mu in post.mu]


def infer_params(spec: Spectrogram, net: MaskNet) -> ScmParams:
    masks, v_q = net_forward(extract_features(spec), net, frequency_scale(spec))
    return masks_to_scm(spec, masks, v_q)


def infer_and_refine(spec: Spectrogram, net: MaskNet, n_refine: int = lgm.N_EM):
    """Network estimate of the model, ``n_refine`` EM sweeps, Wiener output.

    Returns ``(posterior, waves, params)``.
    """
    params = infer_params(spec, net)
    params = lgm.fit(spec, params, n_refine)
    post = lgm.posterior(spec, params)
    return post, posterior_waves(spec, post), params
