"""Differentiable (torch, complex128) counterparts of the covariance-model maths.

Everything here mirrors a numpy routine in :mod:`lgmsep.lgm` or
:mod:`lgmsep.masknet`; the tests cross-check the two paths.
"""

from __future__ import annotations

import torch

TINY = 1e-20
LOADING = 1e-6


def hermitize(a: torch.Tensor) -> torch.Tensor:
    return 0.5 * (a + a.mH)


def outer(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(-1) * x.conj().unsqueeze(-2)


def trace(a: torch.Tensor) -> torch.Tensor:
    return torch.diagonal(a, dim1=-2, dim2=-1).real.sum(-1)


def min_eigvalsh(a: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] == 2:
        p = a[..., 0, 0].real
        q = a[..., 1, 1].real
        return 0.5 * (p + q) - torch.sqrt(0.25 * (p - q) ** 2 + a[..., 0, 1].abs() ** 2)
    return torch.linalg.eigvalsh(a)[..., 0]


class _EigenClamp(torch.autograd.Function):
    """U max(w, floor) U^H for Hermitian input, differentiable in both arguments.

    Only matrices with an eigenvalue below the floor are decomposed; the
    backward pass uses divided differences of the clamp (Daleckii-Krein), so
    it stays finite for repeated eigenvalues.
    """

    @staticmethod
    def forward(ctx, a, floor):
        with torch.no_grad():
            low = min_eigvalsh(a) < floor
            out = a.clone()
            if low.any():
                w, u = torch.linalg.eigh(a[low])
                f = floor[low].unsqueeze(-1)
                wc = torch.maximum(w, f)
                out[low] = (u * wc.unsqueeze(-2).to(u.dtype)) @ u.mH
                ctx.save_for_backward(low, w, u, f)
            else:
                ctx.save_for_backward(low)
        return out

    @staticmethod
    def backward(ctx, grad):
        saved = ctx.saved_tensors
        low = saved[0]
        grad_a = grad.clone()
        grad_floor = torch.zeros(low.shape, dtype=torch.float64, device=grad.device)
        if len(saved) > 1:
            _, w, u, f = saved
            wc = torch.maximum(w, f)
            dw = w.unsqueeze(-1) - w.unsqueeze(-2)
            dc = wc.unsqueeze(-1) - wc.unsqueeze(-2)
            slope = (w >= f).to(w.dtype)
            scale = w.abs().amax(-1, keepdim=True).unsqueeze(-1) + TINY
            close = dw.abs() <= 1e-10 * scale
            safe = torch.where(close, torch.ones_like(dw), dw)
            gamma = torch.where(close, 0.5 * (slope.unsqueeze(-1) + slope.unsqueeze(-2)), dc / safe)
            inner = u.mH @ grad[low] @ u
            grad_a[low] = u @ (gamma.to(inner.dtype) * inner) @ u.mH
            diag = torch.diagonal(inner, dim1=-2, dim2=-1).real
            grad_floor[low] = torch.sum(diag * (w < f).to(diag.dtype), dim=-1)
        return grad_a, grad_floor


def eigen_clamp(a: torch.Tensor, floor: torch.Tensor) -> torch.Tensor:
    a = hermitize(a)
    floor = torch.broadcast_to(torch.as_tensor(floor, dtype=torch.float64), a.shape[:-2])
    return _EigenClamp.apply(a, floor.contiguous())


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched product; 2x2 operands use broadcasting, which beats tiny bmm calls."""
    if a.shape[-1] == 2 and b.shape[-2] == 2:
        return (a.unsqueeze(-1) * b.unsqueeze(-3)).sum(-2)
    return a @ b


def inv_hpd(a: torch.Tensor) -> torch.Tensor:
    """Inverse of Hermitian positive definite matrices (adjugate form for 2x2)."""
    if a.shape[-1] == 2:
        p, q, b = a[..., 0, 0].real, a[..., 1, 1].real, a[..., 0, 1]
        det = (p * q - (b.real**2 + b.imag**2)).unsqueeze(-1).unsqueeze(-1)
        adj = torch.stack(
            [torch.stack([q.to(a.dtype), -b], -1), torch.stack([-b.conj(), p.to(a.dtype)], -1)], -2
        )
        return adj / det
    return hermitize(torch.linalg.inv(a))


def logdet_hpd(a: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] == 2:
        b = a[..., 0, 1]
        return torch.log(a[..., 0, 0].real * a[..., 1, 1].real - (b.real**2 + b.imag**2))
    chol = torch.linalg.cholesky(a)
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1).real).sum(-1)


def inv_loaded(a: torch.Tensor, rel: float = LOADING) -> torch.Tensor:
    a = hermitize(a)
    floor = rel * trace(a) / a.shape[-1] + TINY
    return inv_hpd(eigen_clamp(a, floor))


def delayed(v: torch.Tensor, d: int, dim: int) -> torch.Tensor:
    """Shift ``v`` by ``d`` steps along ``dim`` with zero fill at the start."""
    n = v.shape[dim]
    if d >= n:
        return torch.zeros_like(v)
    head = torch.zeros_like(v.narrow(dim, 0, d))
    return torch.cat([head, v.narrow(dim, 0, n - d)], dim=dim)


def masks_to_scm(x, speech, reverb, noise):
    """Mask-weighted outer-product means.

    x: (B, L, K, M); speech: (B, L, K, S); reverb: (B, L, K, S, Lr);
    noise: (B, L, K). Returns R (B, S, K, M, M), H (B, S, Lr, K, M, M),
    Rn (B, K, M, M).
    """
    xx = outer(x)
    R = torch.einsum("blks,blkmn->bskmn", speech.to(xx.dtype), xx)
    R = R / speech.sum(1).transpose(1, 2).unsqueeze(-1).unsqueeze(-1)
    H = torch.einsum("blksd,blkmn->bsdkmn", reverb.to(xx.dtype), xx)
    H = H / reverb.sum(1).permute(0, 2, 3, 1).unsqueeze(-1).unsqueeze(-1)
    Rn = torch.einsum("blk,blkmn->bkmn", noise.to(xx.dtype), xx)
    Rn = Rn / noise.sum(1).unsqueeze(-1).unsqueeze(-1)
    return hermitize(R), hermitize(H), hermitize(Rn)


def assemble_scm(v, R, H, Rn):
    """v: (B, L, K, S) -> R_x (B, L, K, M, M)."""
    n_reverb = H.shape[2]
    total = torch.einsum("blks,bskmn->blkmn", v.to(R.dtype), R) + Rn.unsqueeze(1)
    if n_reverb:
        vd = torch.stack([delayed(v, d, 1) for d in range(1, n_reverb + 1)], dim=-1)
        total = total + torch.einsum("blksd,bsdkmn->blkmn", vd.to(R.dtype), H)
    return hermitize(total)


def speech_posterior(x, v, R, Rx_inv):
    """Wiener posteriors of every source: mu (B, S, L, K, M), V (B, S, L, K, M, M)."""
    if R.shape[-1] == 2:
        return _speech_posterior_2x2(x, v, R, Rx_inv)
    mus, Vs = [], []
    for i in range(v.shape[-1]):
        C = v[..., i].to(R.dtype).unsqueeze(-1).unsqueeze(-1) * R[:, i].unsqueeze(1)
        W = C @ Rx_inv
        mus.append((W @ x.unsqueeze(-1)).squeeze(-1))
        Vs.append(hermitize(C - W @ C))
    return torch.stack(mus, 1), torch.stack(Vs, 1)


def _speech_posterior_2x2(x, v, R, Rx_inv):
    # mu_i = v_i R_i (Rx^-1 x),  V_i = v_i R_i - v_i^2 R_i Rx^-1 R_i, entry by entry
    x0, x1 = x[..., 0].unsqueeze(1), x[..., 1].unsqueeze(1)
    X = Rx_inv.unsqueeze(1)
    a00, a01, a10, a11 = X[..., 0, 0], X[..., 0, 1], X[..., 1, 0], X[..., 1, 1]
    R = R.unsqueeze(2)
    r00, r01, r10, r11 = R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1]
    v = v.permute(0, 3, 1, 2)
    vc = v.to(R.dtype)
    z0 = a00 * x0 + a01 * x1
    z1 = a10 * x0 + a11 * x1
    mu = torch.stack([vc * (r00 * z0 + r01 * z1), vc * (r10 * z0 + r11 * z1)], -1)
    t00 = r00 * a00 + r01 * a10
    t01 = r00 * a01 + r01 * a11
    t10 = r10 * a00 + r11 * a10
    t11 = r10 * a01 + r11 * a11
    g00 = (t00 * r00 + t01 * r10).real
    g11 = (t10 * r01 + t11 * r11).real
    g01 = 0.5 * ((t00 * r01 + t01 * r11) + (t10 * r00 + t11 * r10).conj())
    v2 = v * v
    p = v * r00.real - v2 * g00
    q = v * r11.real - v2 * g11
    c = vc * r01 - v2.to(R.dtype) * g01
    V = torch.stack([torch.stack([p.to(c.dtype), c], -1), torch.stack([c.conj(), q.to(c.dtype)], -1)], -2)
    return mu, V


def gaussian_kld_terms(mu_p, Vp, logdet_p, mu_q, Vq, floor):
    """Pairwise per-bin KLD, D[b, i, j, l, k] = D(p_i || q_j).

    ``Vp`` must already be clamped and ``logdet_p`` its log-determinant;
    ``floor`` (B, K) clamps the eigenvalues of ``Vq``.
    """
    n_mics = Vq.shape[-1]
    Vq = eigen_clamp(Vq, floor[:, None, None, :])
    logdet_q = logdet_hpd(Vq)
    diff = mu_q.unsqueeze(1) - mu_p.unsqueeze(2)
    if n_mics == 2:
        quad, tr = _kld_quad_trace_2x2(diff, Vp.unsqueeze(2), Vq.unsqueeze(1))
    else:
        Vq_inv = inv_hpd(Vq).unsqueeze(1)
        quad = torch.einsum("bijlkm,bijlkmn,bijlkn->bijlk", diff.conj(), Vq_inv, diff).real
        tr = torch.einsum("bijlkmn,bijlknm->bijlk", Vq_inv, Vp.unsqueeze(2)).real
    return quad + tr + logdet_q.unsqueeze(1) - logdet_p.unsqueeze(2) - n_mics


def _kld_quad_trace_2x2(diff, Vp, Vq):
    """d^H Vq^-1 d and tr(Vq^-1 Vp) through the adjugate, in real arithmetic."""
    pq, qq, cq = Vq[..., 0, 0].real, Vq[..., 1, 1].real, Vq[..., 0, 1]
    pp, qp, cp = Vp[..., 0, 0].real, Vp[..., 1, 1].real, Vp[..., 0, 1]
    det = pq * qq - (cq.real**2 + cq.imag**2)
    d0, d1 = diff[..., 0], diff[..., 1]
    # e = d1 conj(d0)
    er = d1.real * d0.real + d1.imag * d0.imag
    ei = d1.imag * d0.real - d1.real * d0.imag
    quad = qq * (d0.real**2 + d0.imag**2) + pq * (d1.real**2 + d1.imag**2) - 2 * (cq.real * er - cq.imag * ei)
    tr = qq * pp + pq * qp - 2 * (cq.real * cp.real + cq.imag * cp.imag)
    return quad / det, tr / det


def clamp_targets(Vp, floor):
    """Clamped V_p and its log-determinant (no gradient)."""
    with torch.no_grad():
        Vc = eigen_clamp(Vp, floor[:, None, None, :])
        logdet = logdet_hpd(Vc)
    return Vc, logdet
