import json

import numpy as np
import pytest
import torch

from lgmsep import _torch_ops as T
from lgmsep import lgm
from lgmsep._linalg import TINY
from lgmsep.gradcheck import random_problem
from lgmsep.lgm import GaussianPosterior
from lgmsep.loss import (
    KLD_FLOOR,
    Batch,
    forward_chain,
    kld_gaussian,
    loss_and_grad,
    loss_kld,
    loss_l2,
    make_batch,
    pit_assign,
)
from lgmsep.masknet import MaskNet, MaskNetConfig, frequency_scale, infer_params
from lgmsep.signal import Spectrogram

from conftest import random_psd


def brute_kld(mu_p, V_p, mu_q, V_q):
    d = mu_q - mu_p
    Vq_inv = np.linalg.inv(V_q)
    return float(
        np.real(np.conj(d) @ Vq_inv @ d)
        + np.real(np.trace(Vq_inv @ V_p))
        + np.log(np.real(np.linalg.det(V_q)))
        - np.log(np.real(np.linalg.det(V_p)))
        - len(d)
    )


def test_scalar_example():
    val = kld_gaussian(np.zeros(1), np.ones((1, 1)), np.zeros(1), 2 * np.ones((1, 1)))
    assert np.isclose(val, 0.5 + np.log(2) - 1, atol=1e-12)
    assert np.isclose(val, 0.193147, atol=1e-6)


def test_diagonal_example():
    val = kld_gaussian(np.zeros(2), np.eye(2), np.array([1.0, 0.0]), np.diag([2.0, 0.5]))
    assert np.isclose(val, 1.0)


@pytest.mark.parametrize("n", [2, 3])
def test_matches_brute_force(rng, n):
    for _ in range(50):
        mu_p, mu_q = (rng.standard_normal(n) + 1j * rng.standard_normal(n) for _ in range(2))
        V_p, V_q = random_psd(rng, (), n), random_psd(rng, (), n)
        assert np.isclose(kld_gaussian(mu_p, V_p, mu_q, V_q), brute_kld(mu_p, V_p, mu_q, V_q), rtol=1e-10)


def test_nonnegative_and_zero_on_identity(rng):
    mu = rng.standard_normal((200, 2)) + 1j * rng.standard_normal((200, 2))
    V = random_psd(rng, (200,), 2)
    assert np.allclose(kld_gaussian(mu, V, mu, V), 0, atol=1e-12)
    mu2 = rng.standard_normal((200, 2)) + 1j * rng.standard_normal((200, 2))
    assert np.all(kld_gaussian(mu, V, mu2, random_psd(rng, (200,), 2)) >= -1e-9)


def test_floor_keeps_singular_inputs_finite():
    V = np.zeros((2, 2), dtype=complex)
    val = kld_gaussian(np.zeros(2), V, np.ones(2), V, floor=1e-3)
    assert np.isfinite(val) and np.isclose(val, 2 / 1e-3)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        kld_gaussian(np.array([np.nan]), np.ones((1, 1)), np.zeros(1), np.ones((1, 1)))


@pytest.mark.parametrize(
    "pairwise,perm,total",
    [([[0, 5], [5, 0]], (0, 1), 0), ([[5, 0], [0, 5]], (1, 0), 0), ([[1, 2], [3, 1]], (0, 1), 2)],
)
def test_pit_examples(pairwise, perm, total):
    assert pit_assign(pairwise) == (perm, total)


def test_pit_tie_goes_to_identity():
    assert pit_assign(np.ones((3, 3)))[0] == (0, 1, 2)


def test_pit_invariant_under_relabel(rng):
    for _ in range(50):
        pw = rng.uniform(0, 10, (3, 3))
        order = rng.permutation(3)
        f, total = pit_assign(pw)
        g, relabeled = pit_assign(pw[order])
        assert relabeled == total


def test_l2_examples(rng):
    mu = rng.standard_normal((2, 4, 3, 2)) + 1j * rng.standard_normal((2, 4, 3, 2))
    assert loss_l2(mu, mu).total == 0
    shifted = mu.copy()
    shifted[0, 0, 0, 0] += 1
    shifted[0, 1, 2, 1] += 1j
    shifted[1, 3, 1, 0] -= 1
    assert np.isclose(loss_l2(mu, shifted).total, 3)
    swapped = loss_l2(mu, mu[::-1])
    assert swapped.total == 0 and swapped.chosen_perm == (1, 0)


def test_l2_shape_mismatch():
    with pytest.raises(ValueError):
        loss_l2(np.zeros((2, 3)), np.zeros((2, 4)))


def test_breakdown_json(rng):
    p = GaussianPosterior(np.zeros((2, 3, 2, 2), complex), np.broadcast_to(np.eye(2), (2, 3, 2, 2, 2)).astype(complex))
    out = loss_kld(p, p)
    d = json.loads(out.to_json())
    assert d["chosen_perm"] == [0, 1] and d["total"] == pytest.approx(0, abs=1e-12)
    assert np.array(d["pairwise"]).shape == (2, 2)


def test_eigen_clamp_gradient_with_active_clamp():
    rng = np.random.default_rng(0)
    a = torch.from_numpy(random_psd(rng, (4,), 2, ridge=0.0)).requires_grad_()
    w = torch.linalg.eigvalsh(a.detach())
    floor = ((w[:, 0] + w[:, 1]) / 2).clone().requires_grad_()  # clamps the smaller eigenvalue
    assert torch.autograd.gradcheck(lambda m, f: T.eigen_clamp(m, f), (a, floor), eps=1e-6, atol=1e-7)


def test_eigen_clamp_gradient_with_repeated_eigenvalues():
    a = (2.0 * torch.eye(3, dtype=torch.complex128)).requires_grad_()
    floor = torch.tensor(2.5, dtype=torch.float64, requires_grad=True)
    out = T.eigen_clamp(a, floor)
    assert torch.allclose(out, 2.5 * torch.eye(3, dtype=torch.complex128))
    out.real.sum().backward()
    assert torch.isfinite(a.grad).all() and floor.grad.item() == pytest.approx(3.0)


def test_eigen_clamp_inactive_is_identity(rng):
    a = torch.from_numpy(random_psd(rng, (5,), 3))
    assert torch.equal(T.eigen_clamp(a, torch.tensor(1e-9, dtype=torch.float64)), T.hermitize(a))


@pytest.mark.parametrize("n", [2, 3])
def test_torch_inverse_and_logdet(rng, n):
    a = torch.from_numpy(random_psd(rng, (6,), n))
    assert torch.allclose(T.inv_hpd(a), torch.linalg.inv(a), rtol=1e-12)
    assert torch.allclose(T.logdet_hpd(a), torch.linalg.slogdet(a)[1], rtol=1e-12)


@pytest.mark.parametrize("n_mics", [2, 3])
def test_torch_posterior_matches_numpy(rng, n_mics):
    from test_lgm import random_params

    p = lgm.ScmParams(**vars(random_params(rng, n_mics=n_mics)))
    x = rng.standard_normal((n_mics, p.n_frames, p.n_freq)) + 1j * rng.standard_normal((n_mics, p.n_frames, p.n_freq))
    ref = lgm.posterior(Spectrogram(x, frame_size=4, hop=1), p)
    xt = torch.from_numpy(np.transpose(x, (1, 2, 0)))[None]
    v = torch.from_numpy(np.transpose(p.v, (1, 2, 0)))[None]
    R, H, Rn = (torch.from_numpy(a)[None] for a in (p.R, p.H, p.Rn))
    Rx_inv = T.inv_loaded(T.assemble_scm(v, R, H, Rn))
    mu, V = T.speech_posterior(xt, v, R, Rx_inv)
    assert np.allclose(mu[0].numpy(), ref.mu, rtol=1e-10, atol=1e-13)
    assert np.allclose(V[0].numpy(), ref.V, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("n_mics", [2, 3])
def test_torch_kld_terms_match_numpy(rng, n_mics):
    shape = (1, 2, 3, 4)
    mu_p, mu_q = (rng.standard_normal(shape + (n_mics,)) + 1j * rng.standard_normal(shape + (n_mics,)) for _ in range(2))
    V_p, V_q = random_psd(rng, shape, n_mics), random_psd(rng, shape, n_mics)
    floor = torch.full((1, 4), 1e-9, dtype=torch.float64)
    Vp_t = torch.from_numpy(V_p)
    D = T.gaussian_kld_terms(
        torch.from_numpy(mu_p), Vp_t, T.logdet_hpd(Vp_t), torch.from_numpy(mu_q), torch.from_numpy(V_q), floor
    ).numpy()
    for i in range(2):
        for j in range(2):
            ref = kld_gaussian(mu_p[0, i], V_p[0, i], mu_q[0, j], V_q[0, j])
            assert np.allclose(D[0, i, j], ref, rtol=1e-10)


def _numpy_chain_total(spec, target, net, loss_kind):
    phi = infer_params(spec, net)
    q = lgm.posterior(spec, phi)
    if loss_kind == "l2":
        return loss_l2(target.mu, q.mu).total
    floor = KLD_FLOOR * frequency_scale(spec) + TINY
    return loss_kld(target, q, floor).total


@pytest.mark.parametrize("loss_kind", ["kld", "l2"])
@pytest.mark.parametrize("n_reverb", [1, 3])
def test_torch_chain_matches_numpy_chain(loss_kind, n_reverb):
    rng = np.random.default_rng(n_reverb)
    x = rng.standard_normal((2, 12, 5)) + 1j * rng.standard_normal((2, 12, 5))
    spec = Spectrogram(x, frame_size=8, hop=2)
    target, _ = lgm.pcsg_separate(spec, 2, 1, 3, seed=1)
    net = MaskNet(MaskNetConfig(n_freq=5, n_reverb=n_reverb, hidden=(6,), context=1), seed=2, zero_output=False)
    with torch.no_grad():
        total, pairwise, perms, _ = forward_chain(make_batch([spec], [target]), net, loss_kind)
    assert np.isclose(float(total), _numpy_chain_total(spec, target, net, loss_kind), rtol=1e-9)


def test_l2_ignores_covariances():
    batch, net = random_problem(0)
    with torch.no_grad():
        ref, _, _, _ = forward_chain(batch, net, "l2")
        broken = Batch(batch.x, batch.feats, batch.mu_p, torch.full_like(batch.V_p, float("nan")), batch.scale)
        val, _, _, _ = forward_chain(broken, net, "l2")
    assert float(val) == float(ref)


def test_duplicate_sources_tie_to_identity():
    batch, _ = random_problem(1)
    mu_p = batch.mu_p[:, :1].expand_as(batch.mu_p).clone()
    V_p = batch.V_p[:, :1].expand_as(batch.V_p).clone()
    dup = Batch(batch.x, batch.feats, mu_p, V_p, batch.scale)
    net = MaskNet(MaskNetConfig(n_freq=5, hidden=(8,), context=1), seed=0)  # uniform masks: identical q's
    breakdowns, _ = loss_and_grad(dup, net, "kld")
    pw = breakdowns[0].pairwise
    assert np.allclose(pw, pw.T, rtol=1e-12)
    assert breakdowns[0].chosen_perm == (0, 1)


def test_gradients_are_finite_and_shaped():
    batch, net = random_problem(2, n_reverb=4)
    breakdowns, grads = loss_and_grad(batch, net, "kld")
    assert grads.mask_logits.shape == (1, 10, 5, 2 * 5 + 1)
    assert grads.var_logits.shape == (1, 10, 5, 2)
    assert set(grads.params) == {n for n, _ in net.named_parameters()}
    assert all(np.all(np.isfinite(g)) for g in grads.params.values())
    assert breakdowns[0].total >= 0
