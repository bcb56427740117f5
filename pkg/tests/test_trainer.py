import json

import numpy as np
import pytest
import torch

from lgmsep import checkpoint, trainer
from lgmsep.signal import MultichannelWave, write_wav
from lgmsep.simulate import random_scene, write_scene
from lgmsep.trainer import TargetConfig, TrainConfig, TrainingAborted

FAST = TargetConfig(n_em=4, wpe_iters=1, wpe_taps=4)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    for s in range(4):
        write_scene(random_scene(s, duration=0.9), root / f"scene_{s}")
    return root


@pytest.fixture(scope="module")
def targets(dataset):
    return trainer.prepare_targets(dataset, FAST)


def _cfg(**kw):
    base = dict(batch_size=3, segment_len=20, steps=4, hidden=(8,), context=1, eval_every=2, checkpoint_every=2)
    base.update(kw)
    return TrainConfig(**base)


def _params(net):
    return {k: v.copy() for k, v in net.numpy_params().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_one_utterance_gives_one_record_with_expected_shapes(tmp_path):
    write_scene(random_scene(0, duration=0.5), tmp_path / "only")
    recs = trainer.prepare_targets(tmp_path, FAST)
    assert len(recs) == 1
    rec = recs[0]
    L = rec.spec.n_frames
    assert rec.post.mu.shape == (2, L, 129, 2)
    assert rec.post.V.shape == (2, L, 129, 2, 2)


def test_targets_are_bit_reproducible(dataset, targets, tmp_path):
    again = trainer.prepare_targets(dataset, FAST, out_dir=tmp_path)
    for a, b in zip(targets, again):
        assert a.name == b.name
        assert np.array_equal(a.post.mu, b.post.mu) and np.array_equal(a.post.V, b.post.V)
    loaded = trainer.load_targets(tmp_path)
    assert [r.name for r in loaded] == [r.name for r in targets]
    assert np.array_equal(loaded[1].post.V, targets[1].post.V)
    assert np.array_equal(loaded[1].spec.bins, targets[1].spec.bins)


def test_target_covariances_are_psd(targets):
    for rec in targets:
        V = rec.post.V
        assert np.allclose(V, np.conj(np.swapaxes(V, -1, -2)))
        assert np.linalg.eigvalsh(V).min() >= -1e-10 * np.abs(V).max()


def test_unreadable_and_mono_files_are_skipped(tmp_path, caplog):
    (tmp_path / "broken.wav").write_bytes(b"not a wav file")
    write_wav(tmp_path / "mono.wav", MultichannelWave(np.random.default_rng(0).standard_normal((1, 4000)) * 0.1))
    scene = random_scene(1, duration=0.5)
    write_wav(tmp_path / "good.wav", MultichannelWave(scene.mixture))
    recs = trainer.prepare_targets(tmp_path, FAST)
    assert [r.name for r in recs] == ["good"]
    assert "broken.wav" in caplog.text and "mono.wav" in caplog.text


def test_empty_dataset_is_an_error(tmp_path):
    with pytest.raises(ValueError, match="no usable"):
        trainer.prepare_targets(tmp_path, FAST)


@pytest.mark.parametrize(
    "kw",
    [
        dict(batch_size=0),
        dict(segment_len=0),
        dict(steps=-1),
        dict(learning_rate=-1e-3),
        dict(clip_norm=0.0),
        dict(loss_kind="mse"),
        dict(n_reverb=8, segment_len=8),
        dict(val_fraction=1.0),
    ],
)
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.segment_len, cfg.steps, cfg.learning_rate) == (128, 100, 2000, 1e-3)
    assert cfg.clip_norm == 5.0 and cfg.val_fraction == 0.1


def test_split_is_deterministic_and_disjoint():
    tr, va = trainer.split_utterances(20, 0.1, 3)
    assert len(va) == 2 and not set(tr) & set(va) and len(tr) + len(va) == 20
    assert np.array_equal(tr, trainer.split_utterances(20, 0.1, 3)[0])
    assert len(trainer.split_utterances(3, 0.1, 0)[1]) == 1


def test_segments_drop_tails(targets):
    batch = trainer.segment_batch(targets[:1], 20)
    assert batch.size == targets[0].spec.n_frames // 20
    assert tuple(batch.x.shape[1:]) == (20, 129, 2)
    assert trainer.segment_batch(targets[:1], 10_000) is None


def test_sampler_visits_every_segment_once_per_epoch():
    s = trainer.SegmentSampler(10, 3, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(3)])
    assert len(set(seen.tolist())) == 9
    assert len(trainer.SegmentSampler(2, 5, np.random.default_rng(0)).next()) == 2


def test_zero_steps_returns_initialization(targets, tmp_path):
    cfg = _cfg(steps=0)
    res = trainer.train(cfg, targets, checkpoint_path=tmp_path / "c.lgms")
    init = trainer.net_for(cfg, 129, 2)
    assert _same(_params(res.net), _params(init))
    net, meta = trainer.load_model(tmp_path / "c.lgms")
    assert meta["step"] == 0 and _same(_params(net), _params(init))
    assert [e["step"] for e in res.log] == [0]


def test_zero_learning_rate_freezes_parameters(targets):
    cfg = _cfg(learning_rate=0.0, steps=3)
    res = trainer.train(cfg, targets)
    assert _same(_params(res.net), _params(trainer.net_for(cfg, 129, 2)))


def test_training_is_bit_deterministic(targets):
    a = trainer.train(_cfg(), targets)
    b = trainer.train(_cfg(), targets)
    assert a.log == b.log
    assert _same(_params(a.net), _params(b.net))
    assert not _same(_params(a.net), _params(trainer.net_for(_cfg(), 129, 2)))


def test_log_format(targets, tmp_path):
    path = tmp_path / "log.jsonl"
    res = trainer.train(_cfg(), targets, log_path=path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == res.log
    assert [l["step"] for l in lines] == [0, 1, 2, 3, 4]
    for l in lines:
        assert {"step", "loss", "grad_norm", "lr"} <= set(l)
    assert "val_kld" in lines[0] and "val_kld" in lines[2] and "val_kld" in lines[4]
    assert "val_kld" not in lines[1]


def test_post_clip_gradient_norm_is_bounded(targets, monkeypatch):
    clip = trainer.torch.nn.utils.clip_grad_norm_
    seen = []

    def spy(params, max_norm):
        params = list(params)
        pre = clip(params, max_norm)
        post = torch.sqrt(sum((p.grad**2).sum() for p in params if p.grad is not None))
        seen.append((float(pre), float(post), max_norm))
        return pre

    monkeypatch.setattr(trainer.torch.nn.utils, "clip_grad_norm_", spy)
    trainer.train(_cfg(clip_norm=1e-3), targets)
    assert len(seen) == 4
    for pre, post, max_norm in seen:
        assert pre > max_norm  # clipping was active
        assert post <= max_norm + 1e-9


def _abort_at(monkeypatch, bad_step):
    real = trainer.forward_chain
    calls = {"n": 0}

    def chain(batch, net, kind, *a, **kw):
        if torch.is_grad_enabled():
            calls["n"] += 1
            if calls["n"] == bad_step:
                total, pw, perms, extra = real(batch, net, kind, *a, **kw)
                return total * float("nan"), pw, perms, extra
        return real(batch, net, kind, *a, **kw)

    monkeypatch.setattr(trainer, "forward_chain", chain)


def test_non_finite_loss_aborts_and_keeps_last_checkpoint(targets, tmp_path, monkeypatch):
    _abort_at(monkeypatch, 3)
    path = tmp_path / "c.lgms"
    with pytest.raises(TrainingAborted):
        trainer.train(_cfg(), targets, checkpoint_path=path)
    _, meta = checkpoint.load(path)
    assert meta["step"] == 2


def test_resume_matches_uninterrupted_run(targets, tmp_path, monkeypatch):
    full = trainer.train(_cfg(), targets)
    path = tmp_path / "c.lgms"
    with monkeypatch.context() as m:
        _abort_at(m, 4)
        with pytest.raises(TrainingAborted):
            trainer.train(_cfg(), targets, checkpoint_path=path)
    resumed = trainer.train(_cfg(), targets, checkpoint_path=path, resume=path)
    assert _same(_params(resumed.net), _params(full.net))
    assert resumed.log == full.log[3:]


def test_resume_rejects_other_config(targets, tmp_path):
    path = tmp_path / "c.lgms"
    trainer.train(_cfg(steps=0), targets, checkpoint_path=path)
    with pytest.raises(ValueError, match="different configuration"):
        trainer.train(_cfg(steps=0, seed=1), targets, resume=path)


def test_checkpoint_save_load_save_is_byte_identical(targets, tmp_path):
    path = tmp_path / "c.lgms"
    trainer.train(_cfg(steps=2), targets, checkpoint_path=path)
    arrays, meta = checkpoint.load(path)
    checkpoint.save(tmp_path / "d.lgms", arrays, meta)
    assert path.read_bytes() == (tmp_path / "d.lgms").read_bytes()


def test_source_count_mismatch(targets):
    with pytest.raises(ValueError, match="n_sources"):
        trainer.train(_cfg(n_sources=3), targets)
