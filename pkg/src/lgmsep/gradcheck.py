"""Finite-difference audit of the loss gradient chain on small random problems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch

from . import lgm
from .lgm import ScmParams
from .loss import forward_chain, loss_and_grad, make_batch
from .masknet import MaskNet, MaskNetConfig
from .signal import Spectrogram

TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    seed: int
    n_reverb: int
    loss_kind: str
    errors: Dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.errors.values())


def _random_psd(rng, shape, n):
    A = rng.standard_normal(shape + (n, n)) + 1j * rng.standard_normal(shape + (n, n))
    return A @ np.conj(np.swapaxes(A, -1, -2)) / n + 0.1 * np.eye(n)


def random_problem(
    seed: int,
    n_reverb: int = 1,
    n_mics: int = 2,
    n_sources: int = 2,
    n_frames: int = 10,
    n_freq: int = 5,
    hidden=(8,),
):
    """Random spectrogram, valid target posteriors and a random small network."""
    rng = np.random.default_rng(seed)
    frame_size = 2 * (n_freq - 1)
    gain = np.exp(rng.standard_normal((1, n_frames, n_freq)))
    x = gain * (rng.standard_normal((n_mics, n_frames, n_freq)) + 1j * rng.standard_normal((n_mics, n_frames, n_freq)))
    spec = Spectrogram(x, frame_size=frame_size, hop=frame_size // 4, kind="dereverberated")
    theta = ScmParams(
        v=np.exp(rng.standard_normal((n_sources, n_frames, n_freq))),
        R=_random_psd(rng, (n_sources, n_freq), n_mics),
        H=0.1 * _random_psd(rng, (n_sources, n_reverb, n_freq), n_mics),
        Rn=0.05 * _random_psd(rng, (n_freq,), n_mics),
    )
    target = lgm.posterior(spec, theta)
    cfg = MaskNetConfig(
        n_freq=n_freq, n_mics=n_mics, n_sources=n_sources, n_reverb=n_reverb, hidden=hidden, context=1
    )
    net = MaskNet(cfg, seed=seed, zero_output=False)
    return make_batch([spec], [target]), net


def _loss_value(batch, net, loss_kind, logits=None) -> float:
    with torch.no_grad():
        total, _, _, _ = forward_chain(batch, net, loss_kind, logits=logits)
    return float(total)


def _rel(a: float, n: float, atol: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), atol)


def _probe(fn, tensor: torch.Tensor, grad: np.ndarray, rng, n_probe: int, atol: float) -> float:
    """Max relative error over random coordinates plus one random direction."""
    flat = tensor.data.view(-1)
    g = grad.reshape(-1)
    eps = 1e-4 * max(float(flat.abs().max()), 1.0)
    worst = 0.0
    coords = rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
    for c in coords:
        old = flat[c].item()
        flat[c] = old + eps
        up = fn()
        flat[c] = old - eps
        down = fn()
        flat[c] = old
        worst = max(worst, _rel(g[c], (up - down) / (2 * eps), atol))
    direction = torch.from_numpy(rng.standard_normal(flat.numel()))
    direction /= direction.norm()
    base = flat.clone()
    flat.copy_(base + eps * direction)
    up = fn()
    flat.copy_(base - eps * direction)
    down = fn()
    flat.copy_(base)
    worst = max(worst, _rel(float(g @ direction.numpy()), (up - down) / (2 * eps), atol))
    return worst


def check_gradients(
    seed: int, n_reverb: int = 1, loss_kind: str = "kld", n_probe: int = 6, **problem
) -> GradcheckResult:
    """Compare analytic gradients with central differences for every block."""
    batch, net = random_problem(seed, n_reverb=n_reverb, **problem)
    rng = np.random.default_rng(seed + 1)
    _, bundle = loss_and_grad(batch, net, loss_kind)
    g_scale = max(float(np.abs(g).max()) for g in bundle.params.values())
    atol = 1e-7 * g_scale
    result = GradcheckResult(seed, n_reverb, loss_kind)

    for name, p in net.named_parameters():
        result.errors[name] = _probe(
            lambda: _loss_value(batch, net, loss_kind), p, bundle.params[name], rng, n_probe, atol
        )

    with torch.no_grad():
        mask_logits, var_logits = (t.clone().contiguous() for t in net(batch.feats))
    logits = (mask_logits, var_logits)
    for name, t, g in (("mask_logits", mask_logits, bundle.mask_logits), ("var_logits", var_logits, bundle.var_logits)):
        result.errors[name] = _probe(
            lambda: _loss_value(batch, net, loss_kind, logits=logits), t, g, rng, n_probe, atol
        )
    return result


def run(seeds, n_reverbs=(1, 4, 8), loss_kinds=("kld", "l2"), n_probe: int = 6) -> List[GradcheckResult]:
    return [
        check_gradients(seed, lr, kind, n_probe)
        for seed in seeds
        for lr in n_reverbs
        for kind in loss_kinds
    ]
