"""Command-line entry point: ``lgmsep <command> [options]``.

Every option can also come from a flat ``key=value`` file given with
``--config``; command-line flags override the file. Each run echoes its
fully resolved configuration in the same format, so the echo can be fed
back with ``--config`` to repeat the run.

Exit codes: 0 success, 2 bad usage, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

logger = logging.getLogger("lgmsep")


class UsageError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list_of(kind: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        return tuple(kind(t) for t in text.split(",") if t.strip())

    return parse


@dataclass(frozen=True)
class Opt:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    flag: Optional[str] = None

    @property
    def flags(self) -> List[str]:
        return [self.flag or "--" + self.key.replace("_", "-")]


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_floats = _list_of(float)
_ints = _list_of(int)
_strs = _list_of(str)

SEED = Opt("seed", int, 0, "master random seed")
N_SOURCES = Opt("n_sources", int, 2, "number of sources N_s")
N_REVERB = Opt("n_reverb", int, 1, "late-reverberation taps L_r", flag="--lr")
N_EM = Opt("n_em", int, 20, "EM iterations of the unsupervised separator")
N_REFINE = Opt("n_refine", int, 20, "EM refinement iterations after the network")
WPE = [
    Opt("wpe_delay", int, 2, "WPE prediction delay D"),
    Opt("wpe_taps", int, 16, "WPE filter length L_d"),
    Opt("wpe_iters", int, 3, "WPE iterations"),
]
FORCE = Opt("force", _bool, False, "overwrite a non-empty output directory")

COMMANDS: Dict[str, List[Opt]] = {
    "simulate": [
        Opt("out", str, None, "output directory for scene folders"),
        Opt("num", int, 1, "number of scenes"),
        SEED,
        N_SOURCES,
        Opt("n_mics", int, 2, "microphones per scene"),
        Opt("duration", float, 2.0, "seconds per utterance"),
        Opt("rt60", _floats, (0.36, 0.61), "comma-separated RT60 choices in seconds"),
        Opt("snr", _floats, (20.0, 30.0), "SNR range in dB, lo,hi"),
        Opt("sir", _floats, (-5.0, 5.0), "SIR range in dB, lo,hi"),
        FORCE,
    ],
    "separate": [
        Opt("input", str, None, "mixture WAV or scene directory"),
        Opt("out", str, None, "output directory"),
        N_SOURCES,
        N_REVERB,
        N_EM,
        *WPE,
        SEED,
        Opt("eval", str, None, "directory with reference source_<i> WAVs to score against"),
        FORCE,
    ],
    "prepare": [
        Opt("dataset", str, None, "directory of mixtures or scene folders"),
        Opt("out", str, None, "target store directory"),
        N_SOURCES,
        N_REVERB,
        N_EM,
        *WPE,
        SEED,
        FORCE,
    ],
    "train": [
        Opt("targets", str, None, "target store written by prepare"),
        Opt("out", str, None, "output directory (model.lgms, train_log.jsonl)"),
        Opt("batch_size", int, 128, "segments per mini-batch"),
        Opt("segment_len", int, 100, "frames per training segment"),
        Opt("steps", int, 2000, "optimizer steps"),
        Opt("learning_rate", float, 1e-3, "Adam learning rate"),
        Opt("clip_norm", float, 5.0, "global gradient-norm clip"),
        Opt("loss", str, "kld", "loss kind: kld or l2"),
        N_REVERB,
        N_SOURCES,
        Opt("hidden", _ints, (256, 256), "hidden layer widths"),
        Opt("context", int, 2, "context frames on each side"),
        SEED,
        Opt("val_fraction", float, 0.1, "held-out utterance fraction"),
        Opt("eval_every", int, 100, "validation interval in steps"),
        Opt("checkpoint_every", int, 500, "checkpoint interval in steps"),
        Opt("resume", str, None, "checkpoint to resume from"),
        FORCE,
    ],
    "infer": [
        Opt("model", str, None, "trained checkpoint"),
        Opt("input", str, None, "mixture WAV or scene directory"),
        Opt("out", str, None, "output directory"),
        N_REFINE,
        *WPE,
        Opt("eval", str, None, "directory with reference source_<i> WAVs to score against"),
        FORCE,
    ],
    "evaluate": [
        Opt("est", str, None, "directory of estimates (one folder per utterance, or flat)"),
        Opt("ref", str, None, "directory of references with the same layout"),
        Opt("out", str, None, "report directory"),
        FORCE,
    ],
    "gradcheck": [
        SEED,
        Opt("num_seeds", int, 1, "consecutive seeds starting at --seed"),
        Opt("n_reverbs", _ints, (1, 4, 8), "L_r values to check"),
        Opt("losses", _strs, ("kld", "l2"), "loss kinds to check"),
    ],
}

REQUIRED = {
    "simulate": ("out",),
    "separate": ("input", "out"),
    "prepare": ("dataset", "out"),
    "train": ("targets", "out"),
    "infer": ("model", "input", "out"),
    "evaluate": ("est", "ref"),
    "gradcheck": (),
}


def read_config(path: str | os.PathLike) -> Dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def resolve(command: str, flags: Dict[str, Any], file_values: Dict[str, str]) -> Dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    opts = {o.key: o for o in COMMANDS[command]}
    file_values = dict(file_values)
    named = file_values.pop("command", command)
    if named != command:
        raise UsageError(f"config file is for command {named!r}, not {command!r}")
    unknown = sorted(set(file_values) - set(opts))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    cfg = {k: o.default for k, o in opts.items()}
    for key, text in file_values.items():
        try:
            cfg[key] = None if text == "" else opts[key].parse(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return cfg


def format_config(command: str, cfg: Dict[str, Any]) -> str:
    lines = [f"command={command}"] + [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lgmsep", description="Multichannel LGM speech separation")
    parser.add_argument("--config", help="key=value file merged under the command-line flags")
    parser.add_argument("--threads", type=int, default=1, help="worker thread cap (1 is bit-exact)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for o in opts:
            if o.parse is _bool:
                p.add_argument(*o.flags, dest=o.key, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(*o.flags, dest=o.key, type=o.parse, default=None, help=o.help)
    return parser


def _limit_threads(n: int):
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    import torch

    torch.set_num_threads(n)


def _prepare_out(path: str | os.PathLike, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise FileExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, cfg: Dict[str, Any]):
    (out / "config.txt").write_text(format_config(command, cfg))


_SOURCE_RE = re.compile(r"source_(\d+)")


def read_sources(directory: str | os.PathLike):
    """Reference-channel signals of ``*source_<i>*.wav`` files, ordered by i."""
    from .signal import read_wav

    found = {}
    for p in sorted(Path(directory).glob("*.wav")):
        m = _SOURCE_RE.search(p.stem)
        if m:
            found[int(m.group(1))] = read_wav(p).samples[0]
    if not found:
        raise FileNotFoundError(f"no source_<i> WAV files in {directory}")
    idx = sorted(found)
    if idx != list(range(len(idx))):
        raise FileNotFoundError(f"source indices in {directory} are not contiguous from 0")
    return [found[i] for i in idx]


def _score_pair(name: str, est: Sequence, ref: Sequence):
    import numpy as np

    from .metrics import score

    if len(est) != len(ref):
        raise UsageError(f"{name}: {len(est)} estimates but {len(ref)} references")
    n = min(min(len(s) for s in est), min(len(s) for s in ref))
    est_arr = np.stack([np.asarray(s, dtype=float)[:n] for s in est])
    ref_arr = np.stack([np.asarray(s, dtype=float)[:n] for s in ref])
    return score(name, est_arr, ref_arr)


def _write_reports(out: Path, reports):
    from .metrics import reports_csv, summary_table

    payload = {
        "utterances": [json.loads(r.to_json()) for r in reports],
        "mean_sdr": float(sum(r.mean_sdr for r in reports) / len(reports)),
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "report.csv").write_text(reports_csv(reports))
    table = summary_table(reports)
    (out / "report.txt").write_text(table + "\n")
    print(table)


def _load_input(path: str):
    """Mixture wave from a WAV file or a scene directory."""
    from .signal import read_wav

    p = Path(path)
    if p.is_dir():
        p = p / "mixture.wav"
    if not p.is_file():
        raise FileNotFoundError(f"input {p} not found")
    return read_wav(p)


def _write_estimates(out: Path, waves, prefix: str = "est_source"):
    from .signal import write_wav

    for i, w in enumerate(waves):
        write_wav(out / f"{prefix}_{i}.wav", w)


def _dump_params(path: Path, params, meta: dict):
    from . import checkpoint

    checkpoint.save(path, {"v": params.v, "R": params.R, "H": params.H, "Rn": params.Rn}, meta)


def cmd_simulate(cfg: Dict[str, Any]) -> int:
    import numpy as np

    from .simulate import random_scene, write_scene

    if len(cfg["snr"]) != 2 or len(cfg["sir"]) != 2:
        raise UsageError("--snr and --sir take lo,hi")
    if not cfg["rt60"] or min(cfg["rt60"]) <= 0:
        raise UsageError("--rt60 needs positive values")
    if cfg["num"] < 1:
        raise UsageError("--num must be positive")
    out = _prepare_out(cfg["out"], cfg["force"])
    width = max(4, len(str(cfg["num"] - 1)))
    for n in range(cfg["num"]):
        scene_seed = int(np.random.SeedSequence([cfg["seed"], n]).generate_state(1)[0])
        scene = random_scene(
            scene_seed,
            n_sources=cfg["n_sources"],
            n_mics=cfg["n_mics"],
            duration=cfg["duration"],
            rt60_choices=cfg["rt60"],
            snr_range=tuple(cfg["snr"]),
            sir_range=tuple(cfg["sir"]),
        )
        if not scene.check_identity():
            raise FloatingPointError(f"scene {n} violates the mixture identity")
        write_scene(scene, out / f"scene_{n:0{width}d}")
    _write_config(out, "simulate", cfg)
    logger.info("wrote %d scenes to %s", cfg["num"], out)
    return EXIT_OK


def cmd_separate(cfg: Dict[str, Any]) -> int:
    from . import lgm, wpe
    from .masknet import posterior_waves
    from .signal import stft

    wave = _load_input(cfg["input"])
    if wave.n_channels < 2 and cfg["n_sources"] >= 2:
        raise UsageError("need multichannel input")
    out = _prepare_out(cfg["out"], cfg["force"])
    spec = wpe.dereverberate(stft(wave), cfg["wpe_delay"], cfg["wpe_taps"], cfg["wpe_iters"])
    post, params = lgm.pcsg_separate(spec, cfg["n_sources"], cfg["n_reverb"], cfg["n_em"], cfg["seed"])
    waves = posterior_waves(spec, post)
    _write_estimates(out, waves)
    _dump_params(out / "params.lgms", params, {"command": "separate", "seed": cfg["seed"]})
    if cfg["eval"]:
        ref = read_sources(cfg["eval"])
        _write_reports(out, [_score_pair(Path(cfg["input"]).stem, [w.samples[0] for w in waves], ref)])
    _write_config(out, "separate", cfg)
    return EXIT_OK


def _target_config(cfg: Dict[str, Any]):
    from .trainer import TargetConfig

    return TargetConfig(
        n_sources=cfg["n_sources"],
        n_reverb=cfg["n_reverb"],
        n_em=cfg["n_em"],
        wpe_delay=cfg["wpe_delay"],
        wpe_taps=cfg["wpe_taps"],
        wpe_iters=cfg["wpe_iters"],
        seed=cfg["seed"],
    )


def cmd_prepare(cfg: Dict[str, Any]) -> int:
    from .trainer import prepare_targets

    if not Path(cfg["dataset"]).is_dir():
        raise FileNotFoundError(f"dataset directory {cfg['dataset']} not found")
    out = _prepare_out(cfg["out"], cfg["force"])
    records = prepare_targets(cfg["dataset"], _target_config(cfg), out)
    _write_config(out, "prepare", cfg)
    logger.info("prepared %d target records in %s", len(records), out)
    return EXIT_OK


def cmd_train(cfg: Dict[str, Any]) -> int:
    from .trainer import TrainConfig, load_targets, train

    targets = load_targets(cfg["targets"])
    tcfg = TrainConfig(
        batch_size=cfg["batch_size"],
        segment_len=cfg["segment_len"],
        steps=cfg["steps"],
        learning_rate=cfg["learning_rate"],
        clip_norm=cfg["clip_norm"],
        loss_kind=cfg["loss"],
        n_reverb=cfg["n_reverb"],
        n_sources=cfg["n_sources"],
        hidden=cfg["hidden"],
        context=cfg["context"],
        seed=cfg["seed"],
        val_fraction=cfg["val_fraction"],
        eval_every=cfg["eval_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )
    if cfg["resume"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _prepare_out(cfg["out"], cfg["force"])
    _write_config(out, "train", cfg)
    result = train(
        tcfg,
        targets,
        log_path=out / "train_log.jsonl",
        checkpoint_path=out / "model.lgms",
        resume=cfg["resume"],
    )
    logger.info("trained %d steps; final entry %s", result.step, result.log[-1] if result.log else None)
    return EXIT_OK


def cmd_infer(cfg: Dict[str, Any]) -> int:
    from . import wpe
    from .masknet import infer_and_refine
    from .signal import stft
    from .trainer import load_model

    net, _ = load_model(cfg["model"])
    wave = _load_input(cfg["input"])
    if wave.n_channels != net.cfg.n_mics:
        raise UsageError(f"model expects {net.cfg.n_mics} channels, input has {wave.n_channels}")
    out = _prepare_out(cfg["out"], cfg["force"])
    spec = wpe.dereverberate(stft(wave), cfg["wpe_delay"], cfg["wpe_taps"], cfg["wpe_iters"])
    if spec.n_freq != net.cfg.n_freq:
        raise UsageError("model frequency resolution does not match the input")
    _, waves, params = infer_and_refine(spec, net, cfg["n_refine"])
    _write_estimates(out, waves)
    _dump_params(out / "params.lgms", params, {"command": "infer"})
    if cfg["eval"]:
        ref = read_sources(cfg["eval"])
        _write_reports(out, [_score_pair(Path(cfg["input"]).stem, [w.samples[0] for w in waves], ref)])
    _write_config(out, "infer", cfg)
    return EXIT_OK


def _utterance_dirs(root: Path) -> Dict[str, Path]:
    subs = {p.name: p for p in sorted(root.iterdir()) if p.is_dir()} if root.is_dir() else {}
    subs = {k: p for k, p in subs.items() if any(_SOURCE_RE.search(f.stem) for f in p.glob("*.wav"))}
    return subs or {root.name: root}


def cmd_evaluate(cfg: Dict[str, Any]) -> int:
    est_root, ref_root = Path(cfg["est"]), Path(cfg["ref"])
    for p in (est_root, ref_root):
        if not p.is_dir():
            raise FileNotFoundError(f"directory {p} not found")
    est_dirs = _utterance_dirs(est_root)
    ref_dirs = _utterance_dirs(ref_root)
    if len(est_dirs) == 1 and len(ref_dirs) == 1:
        pairs = [(next(iter(ref_dirs)), next(iter(est_dirs.values())), next(iter(ref_dirs.values())))]
    else:
        common = sorted(set(est_dirs) & set(ref_dirs))
        if not common:
            raise FileNotFoundError("no utterance folders shared by --est and --ref")
        pairs = [(n, est_dirs[n], ref_dirs[n]) for n in common]
    reports = [_score_pair(n, read_sources(e), read_sources(r)) for n, e, r in pairs]
    out = _prepare_out(cfg["out"] or est_root / "eval", cfg["force"])
    _write_reports(out, reports)
    _write_config(out, "evaluate", cfg)
    return EXIT_OK


def cmd_gradcheck(cfg: Dict[str, Any]) -> int:
    from .gradcheck import TOLERANCE, run

    if cfg["num_seeds"] < 1:
        raise UsageError("--num-seeds must be positive")
    seeds = range(cfg["seed"], cfg["seed"] + cfg["num_seeds"])
    results = run(seeds, cfg["n_reverbs"], cfg["losses"])
    worst = max(r.max_rel_err for r in results)
    for r in results:
        logger.info("seed=%d L_r=%d loss=%s max_rel_err=%.3e", r.seed, r.n_reverb, r.loss_kind, r.max_rel_err)
    ok = worst <= TOLERANCE
    print(f"max_rel_err={worst:.3e} {'<=' if ok else '>'} {TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {
    "simulate": cmd_simulate,
    "separate": cmd_separate,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    from .checkpoint import CheckpointError

    try:
        _limit_threads(args.threads)
        flags = {o.key: getattr(args, o.key) for o in COMMANDS[args.command]}
        file_values = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, flags, file_values)
        sys.stderr.write(format_config(args.command, cfg))
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lgmsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"lgmsep: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"lgmsep: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"lgmsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
