"""Target generation with the unsupervised separator and mask-head training."""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint, lgm, wpe
from .lgm import GaussianPosterior, ScmParams
from .loss import KLD_FLOOR, LOSS_KINDS, Batch, forward_chain
from .masknet import MaskNet, MaskNetConfig, frequency_scale
from .signal import Spectrogram, extract_features, read_wav, stft

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingAborted(FloatingPointError):
    """Non-finite loss or gradient; the last checkpoint on disk is left intact."""


@dataclass
class TargetConfig:
    n_sources: int = 2
    n_reverb: int = 1
    n_em: int = lgm.N_EM
    wpe_delay: int = wpe.DELAY
    wpe_taps: int = wpe.TAPS
    wpe_iters: int = wpe.ITERS
    seed: int = 0


@dataclass
class TargetRecord:
    """Unsupervised posterior targets for one utterance."""

    name: str
    spec: Spectrogram  # dereverberated input
    post: GaussianPosterior
    params: ScmParams
    meta: dict = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "spec": self.spec.bins,
            "mu": self.post.mu,
            "V": self.post.V,
            "theta.v": self.params.v,
            "theta.R": self.params.R,
            "theta.H": self.params.H,
            "theta.Rn": self.params.Rn,
        }

    def save(self, path: str | os.PathLike):
        spec = self.spec
        meta = dict(self.meta)
        meta.update(
            name=self.name,
            spec={
                "frame_size": spec.frame_size,
                "hop": spec.hop,
                "kind": spec.kind,
                "sample_rate": spec.sample_rate,
                "pad": spec.pad,
                "length": spec.length,
            },
        )
        checkpoint.save(path, self.to_arrays(), meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TargetRecord":
        arrays, meta = checkpoint.load(path)
        spec = Spectrogram(arrays["spec"], **meta["spec"])
        params = ScmParams(arrays["theta.v"], arrays["theta.R"], arrays["theta.H"], arrays["theta.Rn"])
        post = GaussianPosterior(arrays["mu"], arrays["V"])
        extra = {k: v for k, v in meta.items() if k not in ("name", "spec")}
        return cls(meta["name"], spec, post, params, extra)


def utterance_seed(seed: int, name: str) -> int:
    """Per-utterance seed, independent of dataset order."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def discover_mixtures(root: str | os.PathLike) -> List[Tuple[str, Path]]:
    """Sorted ``(name, path)`` pairs.

    A directory holding scene folders yields each folder's ``mixture.wav``;
    otherwise every ``*.wav`` below ``root`` is an utterance.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} not found")
    scenes = sorted(p for p in root.rglob("mixture.wav"))
    paths = scenes if scenes else sorted(root.rglob("*.wav"))
    out = []
    for p in paths:
        rel = p.parent.relative_to(root) if scenes else p.relative_to(root).with_suffix("")
        out.append((str(rel).replace(os.sep, "__") or p.stem, p))
    return out


def make_target(spec: Spectrogram, name: str, cfg: TargetConfig) -> TargetRecord:
    """WPE, then the unsupervised separator, on one mixture spectrogram."""
    derev = wpe.dereverberate(spec, cfg.wpe_delay, cfg.wpe_taps, cfg.wpe_iters)
    seed = utterance_seed(cfg.seed, name)
    post, params = lgm.pcsg_separate(derev, cfg.n_sources, cfg.n_reverb, cfg.n_em, seed)
    return TargetRecord(name, derev, post, params, {"target_config": asdict(cfg), "utt_seed": seed})


def prepare_targets(
    dataset: str | os.PathLike,
    cfg: TargetConfig = TargetConfig(),
    out_dir: Optional[str | os.PathLike] = None,
) -> List[TargetRecord]:
    """Targets for every readable mixture in ``dataset``, optionally persisted."""
    records = []
    items = discover_mixtures(dataset)
    for name, path in items:
        try:
            wave = read_wav(path)
            spec = stft(wave)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        if spec.n_mics < 2 and cfg.n_sources > 1:
            logger.warning("skipping %s: need multichannel input", path)
            continue
        rec = make_target(spec, name, cfg)
        rec.meta["source"] = str(path)
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            rec.save(Path(out_dir) / f"{name}.lgms")
        records.append(rec)
    if not records:
        raise ValueError(f"no usable utterances in {dataset}")
    return records


def load_targets(directory: str | os.PathLike) -> List[TargetRecord]:
    paths = sorted(Path(directory).glob("*.lgms"))
    if not paths:
        raise FileNotFoundError(f"no target records in {directory}")
    return [TargetRecord.load(p) for p in paths]


@dataclass
class TrainConfig:
    batch_size: int = 128
    segment_len: int = 100
    steps: int = 2000
    learning_rate: float = 1e-3
    clip_norm: float = 5.0
    loss_kind: str = "kld"
    n_reverb: int = 1
    n_sources: int = 2
    hidden: Tuple[int, ...] = (256, 256)
    context: int = 2
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 100
    checkpoint_every: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        positive = ("batch_size", "segment_len", "clip_norm", "n_sources", "eval_every", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.learning_rate < 0 or self.n_reverb < 0:
            raise ValueError("steps, learning_rate and n_reverb must be non-negative")
        if self.segment_len < self.n_reverb + 1:
            raise ValueError("segment_len must be at least n_reverb + 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def split_utterances(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic (train, validation) index split; at least one of each when n >= 2."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    if val_fraction > 0 and n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def segment_batch(records: Sequence[TargetRecord], segment_len: int) -> Optional[Batch]:
    """All full-length segments of ``records`` stacked; tails are dropped."""
    xs, feats, mus, Vs, scales = [], [], [], [], []
    for rec in records:
        x = np.transpose(rec.spec.bins, (1, 2, 0))
        f = extract_features(rec.spec).features
        scale = frequency_scale(rec.spec)
        for start in range(0, rec.spec.n_frames - segment_len + 1, segment_len):
            sl = slice(start, start + segment_len)
            xs.append(x[sl])
            feats.append(f[sl])
            mus.append(rec.post.mu[:, sl])
            Vs.append(rec.post.V[:, sl])
            scales.append(scale)
    if not xs:
        return None
    return Batch(
        x=torch.from_numpy(np.stack(xs)),
        feats=torch.from_numpy(np.stack(feats)),
        mu_p=torch.from_numpy(np.stack(mus)),
        V_p=torch.from_numpy(np.stack(Vs)),
        scale=torch.from_numpy(np.stack(scales)),
    )


def _prepared(batch: Batch) -> Batch:
    """Clamp targets once; the raw covariances are not needed afterwards."""
    batch.prepare(KLD_FLOOR)
    batch.V_p = batch.Vp_clamped
    return batch


def mean_loss(batch: Batch, net: MaskNet, loss_kind: str, chunk: int = 32) -> float:
    """Per-bin mean PIT loss over every segment of ``batch`` (no gradient)."""
    total = 0.0
    with torch.no_grad():
        for s in range(0, batch.size, chunk):
            part = batch.select(range(s, min(s + chunk, batch.size)))
            value, _, _, _ = forward_chain(part, net, loss_kind)
            total += float(value)
    return total / batch.n_bins


class SegmentSampler:
    """Epoch-wise shuffled mini-batches of segment indices.

    With fewer segments than the batch size every step uses all of them.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return np.sort(idx)

    def state(self) -> Tuple[dict, np.ndarray, int]:
        return self.rng.bit_generator.state, self.order.copy(), self.pos

    def restore(self, rng_state: dict, order: np.ndarray, pos: int):
        self.rng.bit_generator.state = rng_state
        self.order = np.asarray(order, dtype=np.int64)
        self.pos = int(pos)


@dataclass
class TrainResult:
    net: MaskNet
    log: List[dict]
    train_idx: np.ndarray
    val_idx: np.ndarray
    step: int


def net_for(cfg: TrainConfig, n_freq: int, n_mics: int) -> MaskNet:
    net_cfg = MaskNetConfig(
        n_freq=n_freq,
        n_mics=n_mics,
        n_sources=cfg.n_sources,
        n_reverb=cfg.n_reverb,
        hidden=cfg.hidden,
        context=cfg.context,
    )
    return MaskNet(net_cfg, seed=cfg.seed)


def save_checkpoint(
    path: str | os.PathLike,
    net: MaskNet,
    opt: torch.optim.Adam,
    cfg: TrainConfig,
    step: int,
    sampler: Optional[SegmentSampler] = None,
):
    arrays = {f"net/{k}": v for k, v in net.numpy_params().items()}
    adam_steps = {}
    for name, p in net.named_parameters():
        state = opt.state.get(p)
        if state:
            arrays[f"adam/{name}/exp_avg"] = state["exp_avg"].detach().numpy()
            arrays[f"adam/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
            adam_steps[name] = int(state["step"])
    meta = {
        "format": "lgmsep-masknet",
        "config": cfg.to_dict(),
        "net": net.cfg.to_dict(),
        "step": step,
        "adam_step": adam_steps,
    }
    if sampler is not None:
        rng_state, order, pos = sampler.state()
        meta["rng_state"] = rng_state
        meta["sampler_pos"] = pos
        arrays["sampler/order"] = order
    checkpoint.save(path, arrays, meta)


def load_model(path: str | os.PathLike) -> Tuple[MaskNet, dict]:
    """Network and metadata from a training checkpoint."""
    arrays, meta = checkpoint.load(path)
    if meta.get("format") != "lgmsep-masknet":
        raise checkpoint.CheckpointError(f"{path} is not a mask-network checkpoint")
    net = MaskNet(MaskNetConfig(**meta["net"]))
    net.load_numpy_params({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
    return net, meta


def _restore_optimizer(opt: torch.optim.Adam, net: MaskNet, arrays: Dict[str, np.ndarray], meta: dict):
    for name, p in net.named_parameters():
        if name in meta["adam_step"]:
            opt.state[p] = {
                "step": torch.tensor(float(meta["adam_step"][name])),
                "exp_avg": torch.from_numpy(arrays[f"adam/{name}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"]),
            }


def train(
    cfg: TrainConfig,
    targets: Sequence[TargetRecord],
    log_path: Optional[str | os.PathLike] = None,
    checkpoint_path: Optional[str | os.PathLike] = None,
    resume: Optional[str | os.PathLike] = None,
) -> TrainResult:
    """Adam on the per-bin PIT loss over shuffled fixed-length segments.

    Each JSON log line carries ``step, loss, grad_norm, lr``; evaluation
    steps add ``val_loss`` (training loss kind) and ``val_kld``.
    """
    if not targets:
        raise ValueError("no training targets")
    first = targets[0].spec
    if any(r.post.mu.shape[0] != cfg.n_sources for r in targets):
        raise ValueError("target source count differs from n_sources")
    train_idx, val_idx = split_utterances(len(targets), cfg.val_fraction, cfg.seed)
    train_set = segment_batch([targets[i] for i in train_idx], cfg.segment_len)
    if train_set is None:
        raise ValueError(f"no utterance is at least {cfg.segment_len} frames long")
    train_set = _prepared(train_set)
    val_set = segment_batch([targets[i] for i in val_idx], cfg.segment_len)
    val_set = _prepared(val_set) if val_set is not None else None

    torch.manual_seed(cfg.seed)
    net = net_for(cfg, first.n_freq, first.n_mics)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    sampler = SegmentSampler(train_set.size, cfg.batch_size, np.random.default_rng(cfg.seed))
    start = 0
    if resume is not None:
        arrays, meta = checkpoint.load(resume)
        if meta.get("config") != cfg.to_dict():
            raise ValueError("resume checkpoint was written with a different configuration")
        net.load_numpy_params({k[4:]: v for k, v in arrays.items() if k.startswith("net/")})
        _restore_optimizer(opt, net, arrays, meta)
        if "rng_state" in meta:
            sampler.restore(meta["rng_state"], arrays["sampler/order"], meta["sampler_pos"])
        start = int(meta["step"])

    log: List[dict] = []
    log_fh = open(log_path, "a" if resume is not None else "w") if log_path else None

    def emit(entry: dict):
        log.append(entry)
        if log_fh:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

    def validation(entry: dict):
        if val_set is None:
            return
        entry["val_loss"] = mean_loss(val_set, net, cfg.loss_kind)
        entry["val_kld"] = entry["val_loss"] if cfg.loss_kind == "kld" else mean_loss(val_set, net, "kld")

    try:
        if start == 0:
            entry = {"step": 0, "loss": mean_loss(train_set, net, cfg.loss_kind), "grad_norm": None, "lr": cfg.learning_rate}
            validation(entry)
            emit(entry)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, net, opt, cfg, 0, sampler)
        for step in range(start + 1, cfg.steps + 1):
            batch = train_set.select(sampler.next())
            opt.zero_grad()
            try:
                total, _, _, _ = forward_chain(batch, net, cfg.loss_kind)
            except FloatingPointError as exc:
                raise TrainingAborted(f"step {step}: {exc}") from exc
            loss = total / batch.n_bins
            if not torch.isfinite(loss):
                raise TrainingAborted(f"step {step}: non-finite loss")
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.clip_norm))
            if not math.isfinite(grad_norm):
                raise TrainingAborted(f"step {step}: non-finite gradient norm")
            opt.step()
            entry = {"step": step, "loss": loss.item(), "grad_norm": grad_norm, "lr": cfg.learning_rate}
            if step % cfg.eval_every == 0 or step == cfg.steps:
                validation(entry)
            emit(entry)
            if checkpoint_path and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
                save_checkpoint(checkpoint_path, net, opt, cfg, step, sampler)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(net, log, train_idx, val_idx, max(start, cfg.steps))
