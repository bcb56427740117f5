"""Gaussian KL training objective with utterance-level permutation search.

The loss compares, bin by bin, the posterior of each unsupervised target
source ``p_i = N(mu_p, V_p)`` with the network-driven posterior
``q_j = N(mu_q, V_q)``:

    D(p_i || q_j) = (mu_q - mu_p)^H V_q^-1 (mu_q - mu_p)
                    + tr(V_q^-1 V_p) + log|V_q| - log|V_p| - M

summed over frames and frequencies, minimised over source assignments.
Covariance eigenvalues are clamped from below before evaluation, on both
sides, so the value stays a proper divergence.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import _torch_ops as T
from ._linalg import TINY, floor_eigenvalues, hermitize
from .lgm import GaussianPosterior
from .masknet import MaskNet, frequency_scale, split_masks
from .signal import Spectrogram, extract_features

KLD_FLOOR = 1e-6
LOSS_KINDS = ("kld", "l2")
MAX_PIT_SOURCES = 4


def kld_gaussian(mu_p, V_p, mu_q, V_q, floor=0.0) -> np.ndarray:
    """Closed-form KLD between complex Gaussians, batched over leading axes.

    Eigenvalues of both covariances are clamped at ``floor`` first; with
    ``floor=0`` the covariances must be positive definite.
    """
    mu_p, V_p, mu_q, V_q = (np.asarray(a) for a in (mu_p, V_p, mu_q, V_q))
    for a in (mu_p, V_p, mu_q, V_q):
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite KLD input")
    n_mics = V_q.shape[-1]
    if np.any(np.asarray(floor) > 0):
        V_p = floor_eigenvalues(V_p, floor)
        V_q = floor_eigenvalues(V_q, floor)
    chol_q = np.linalg.cholesky(hermitize(V_q))
    chol_p = np.linalg.cholesky(hermitize(V_p))
    diff = (mu_q - mu_p)[..., None]
    z = np.linalg.solve(chol_q, diff)[..., 0]
    quad = np.sum(np.abs(z) ** 2, axis=-1)
    tr = np.sum(np.abs(np.linalg.solve(chol_q, chol_p)) ** 2, axis=(-2, -1))
    logdet_q = 2 * np.sum(np.log(np.real(np.diagonal(chol_q, axis1=-2, axis2=-1))), axis=-1)
    logdet_p = 2 * np.sum(np.log(np.real(np.diagonal(chol_p, axis1=-2, axis2=-1))), axis=-1)
    return quad + tr + logdet_q - logdet_p - n_mics


def pit_assign(pairwise) -> Tuple[Tuple[int, ...], float]:
    """Minimising assignment ``f`` (target i -> estimate f[i]) and its total.

    Permutations are enumerated in lexicographic order and the first minimum
    wins, so ties resolve to the lowest permutation. Totals use exactly
    rounded summation, so relabeling the references cannot change them.
    """
    pairwise = np.asarray(pairwise, dtype=float)
    n = pairwise.shape[0]
    if n > MAX_PIT_SOURCES:
        raise ValueError(f"exhaustive PIT supports at most {MAX_PIT_SOURCES} sources")
    best, best_total = None, np.inf
    for f in itertools.permutations(range(n)):
        total = math.fsum(pairwise[i, f[i]] for i in range(n))
        if total < best_total:
            best, best_total = f, total
    return best, best_total


@dataclass
class LossBreakdown:
    pairwise: np.ndarray
    chosen_perm: Tuple[int, ...]
    total: float

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "chosen_perm": list(self.chosen_perm),
            "pairwise": np.asarray(self.pairwise).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def l2_pairwise(mu_p: np.ndarray, mu_q: np.ndarray) -> np.ndarray:
    n = mu_p.shape[0]
    return np.array(
        [[np.sum(np.abs(mu_q[j] - mu_p[i]) ** 2) for j in range(n)] for i in range(n)]
    )


def loss_l2(mu_p: np.ndarray, mu_q: np.ndarray) -> LossBreakdown:
    """PIT-minimised sum of squared posterior-mean differences."""
    if np.shape(mu_p) != np.shape(mu_q):
        raise ValueError("mean fields must have matching shapes")
    pairwise = l2_pairwise(np.asarray(mu_p), np.asarray(mu_q))
    f, total = pit_assign(pairwise)
    return LossBreakdown(pairwise, f, total)


def loss_kld(p: GaussianPosterior, q: GaussianPosterior, floor=0.0) -> LossBreakdown:
    """PIT-minimised KLD between two posterior fields (numpy reference path)."""
    n = p.mu.shape[0]
    pairwise = np.array(
        [
            [np.sum(kld_gaussian(p.mu[i], p.V[i], q.mu[j], q.V[j], floor)) for j in range(n)]
            for i in range(n)
        ]
    )
    f, total = pit_assign(pairwise)
    return LossBreakdown(pairwise, f, total)


@dataclass
class Batch:
    """Stacked equal-length segments ready for the differentiable chain."""

    x: torch.Tensor  # (B, L, K, M) complex
    feats: torch.Tensor  # (B, L, F)
    mu_p: torch.Tensor  # (B, S, L, K, M)
    V_p: torch.Tensor  # (B, S, L, K, M, M)
    scale: torch.Tensor  # (B, K)
    Vp_clamped: Optional[torch.Tensor] = None
    logdet_p: Optional[torch.Tensor] = None

    def prepare(self, kld_floor: float = KLD_FLOOR) -> "Batch":
        """Precompute the clamped target covariances (they never change)."""
        self.Vp_clamped, self.logdet_p = T.clamp_targets(self.V_p, kld_floor * self.scale + TINY)
        return self

    def select(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        return Batch(*(pick(getattr(self, f)) for f in self.__dataclass_fields__))

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        def cat(name):
            parts = [getattr(b, name) for b in batches]
            return None if any(p is None for p in parts) else torch.cat(parts)

        return Batch(*(cat(f) for f in Batch.__dataclass_fields__))

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def n_bins(self) -> int:
        return self.x.shape[0] * self.x.shape[1] * self.x.shape[2]


def make_batch(specs: Sequence[Spectrogram], targets: Sequence[GaussianPosterior]) -> Batch:
    xs, feats, mus, Vs, scales = [], [], [], [], []
    for spec, tgt in zip(specs, targets):
        xs.append(np.transpose(spec.bins, (1, 2, 0)))
        feats.append(extract_features(spec).features)
        mus.append(tgt.mu)
        Vs.append(tgt.V)
        scales.append(frequency_scale(spec))
    return Batch(
        x=torch.from_numpy(np.stack(xs)),
        feats=torch.from_numpy(np.stack(feats)),
        mu_p=torch.from_numpy(np.stack(mus)),
        V_p=torch.from_numpy(np.stack(Vs)),
        scale=torch.from_numpy(np.stack(scales)),
    )


@dataclass
class GradientBundle:
    mask_logits: np.ndarray
    var_logits: np.ndarray
    params: Dict[str, np.ndarray] = field(default_factory=dict)


def _check(t: torch.Tensor, stage: str):
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {stage}")


def forward_chain(
    batch: Batch,
    net: MaskNet,
    loss_kind: str = "kld",
    kld_floor: float = KLD_FLOOR,
    logits: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
):
    """Differentiable loss evaluation.

    Returns ``(total, pairwise, perms, extras)`` where ``total`` is a scalar
    tensor, ``pairwise`` (B, S, S) utterance-summed divergences and
    ``perms`` the per-segment minimising assignments. ``logits`` replaces
    the network output when given (used for logit-level gradient checks).
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    cfg = net.cfg
    mask_logits, var_logits = net(batch.feats) if logits is None else logits
    masks = torch.softmax(mask_logits, dim=-1)
    speech, reverb, noise = split_masks(masks, cfg.n_sources, cfg.n_reverb)
    v = torch.exp(var_logits) * batch.scale[:, None, :, None]
    R, H, Rn = T.masks_to_scm(batch.x, speech, reverb, noise)
    _check(R, "masks_to_scm")
    Rx_inv = T.inv_loaded(T.assemble_scm(v, R, H, Rn))
    _check(Rx_inv, "assemble_scm")
    mu_q, V_q = T.speech_posterior(batch.x, v, R, Rx_inv)
    _check(mu_q, "mwf_posterior")

    if loss_kind == "kld":
        floor = kld_floor * batch.scale + TINY
        if batch.Vp_clamped is None:
            V_p, logdet_p = T.clamp_targets(batch.V_p, floor)
        else:
            V_p, logdet_p = batch.Vp_clamped, batch.logdet_p
        terms = T.gaussian_kld_terms(batch.mu_p, V_p, logdet_p, mu_q, V_q, floor)
    else:
        diff = mu_q.unsqueeze(1) - batch.mu_p.unsqueeze(2)
        terms = (diff.abs() ** 2).sum(-1)
    pairwise = terms.sum((-2, -1))
    _check(pairwise, f"{loss_kind} loss")

    perms = []
    chosen = []
    pw = pairwise.detach().numpy()
    for b in range(batch.size):
        f, _ = pit_assign(pw[b])
        perms.append(f)
        chosen.append(torch.stack([pairwise[b, i, f[i]] for i in range(len(f))]).sum())
    total = torch.stack(chosen).sum()
    return total, pairwise, perms, {"mask_logits": mask_logits, "var_logits": var_logits}


def loss_and_grad(
    batch: Batch, net: MaskNet, loss_kind: str = "kld", kld_floor: float = KLD_FLOOR
) -> Tuple[List[LossBreakdown], GradientBundle]:
    """Loss breakdown per segment and exact gradients of the summed total.

    The targets are constants; the assignment is held at its minimiser.
    """
    net.zero_grad()
    total, pairwise, perms, extras = forward_chain(batch, net, loss_kind, kld_floor)
    for t in extras.values():
        t.retain_grad()
    total.backward()
    grads = {}
    for name, p in net.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad
        _check(g, f"gradient of {name}")
        grads[name] = g.detach().numpy().copy()
    pw = pairwise.detach().numpy()
    breakdowns = [
        LossBreakdown(pw[b], perms[b], math.fsum(pw[b, i, perms[b][i]] for i in range(len(perms[b]))))
        for b in range(batch.size)
    ]
    bundle = GradientBundle(
        mask_logits=extras["mask_logits"].grad.detach().numpy().copy(),
        var_logits=extras["var_logits"].grad.detach().numpy().copy(),
        params=grads,
    )
    return breakdowns, bundle
