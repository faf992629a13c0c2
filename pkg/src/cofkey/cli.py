"""Command-line entry points: synth, train, calibrate, eval.

Configuration comes from one YAML file with sections data/cqt/network/train/
eval/synth; unknown keys anywhere are rejected. A handful of flags override
the most commonly swept fields. The file as given is captured verbatim to
out_dir/config.yaml, and the resolved settings (after overrides) land next to
it in config_resolved.yaml.

Exit codes: 0 success, 2 configuration problem, 3 data problem, 4 training
collapsed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import __version__
from .audio_io import AudioIOError, load_audio
from .checkpoint import CheckpointError, load_checkpoint, model_from_bundle
from .data import (DataError, KeyLabel, SynthSpec, load_manifest, synthesize_corpus)
from .evaluation import (CalibrationState, EvalCounts, EvaluationError, calibrate,
                         evaluate_manifest, ksea_score, mirex_score,
                         segment_frames_from_bundle)
from .frontend import CqtError, CqtParams
from .network import ChromaNetConfig, NetworkError, scaled_channels
from .objectives import ObjectiveError
from .training import TrainConfig, TrainingError, expected_out_channels, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_COLLAPSE = 4

_CONFIG_SECTIONS = ("data", "cqt", "network", "train", "eval", "synth")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    manifest: str | None = None
    audio_root: str | None = None


@dataclass(frozen=True)
class EvalSection:
    fifth_both_directions: bool = False
    baseline: str | None = None


def _build(cls, mapping: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - names)
    if unknown:
        raise ConfigError(f"unknown {where} option(s): {', '.join(unknown)}")
    try:
        return cls(**mapping)
    except (TypeError, ValueError, TrainingError, NetworkError, CqtError) as e:
        raise ConfigError(f"bad {where} section: {e}") from e


def _network_config(section: dict) -> ChromaNetConfig:
    section = dict(section)
    mult = section.pop("width_multiplier", None)
    if mult is not None:
        if "channels" in section:
            raise ConfigError("give either network.width_multiplier or network.channels")
        defaults = ChromaNetConfig.__dataclass_fields__["channels"].default
        section["channels"] = scaled_channels(defaults, float(mult))
    for key in ("channels", "time_strides"):
        if key in section and isinstance(section[key], list):
            section[key] = tuple(section[key])
    return _build(ChromaNetConfig, section, "network")


@dataclass
class RunConfig:
    data: DataSection
    cqt: CqtParams
    network_section: dict
    train: TrainConfig
    eval: EvalSection
    synth: SynthSpec
    raw_text: str | None

    def network(self, mode: str | None = None) -> ChromaNetConfig:
        section = dict(self.network_section)
        if mode is not None and "out_channels" not in section:
            section["out_channels"] = expected_out_channels(mode)
        return _network_config(section)


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw_text = None
    doc: dict = {}
    if path is not None:
        raw_text = Path(path).read_text()
        loaded = yaml.safe_load(raw_text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a YAML mapping")
        doc = loaded
    unknown = sorted(set(doc) - set(_CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name in _CONFIG_SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"config section {name!r} must be a mapping")

    sections = {name: dict(doc.get(name, {})) for name in _CONFIG_SECTIONS}
    for name, values in (overrides or {}).items():
        sections[name].update({k: v for k, v in values.items() if v is not None})

    if "tempo_range" in sections["synth"] and isinstance(sections["synth"]["tempo_range"], list):
        sections["synth"]["tempo_range"] = tuple(sections["synth"]["tempo_range"])

    cfg = RunConfig(
        data=_build(DataSection, sections["data"], "data"),
        cqt=_build(CqtParams, sections["cqt"], "cqt"),
        network_section=sections["network"],
        train=_build(TrainConfig, sections["train"], "train"),
        eval=_build(EvalSection, sections["eval"], "eval"),
        synth=_build(SynthSpec, sections["synth"], "synth"),
        raw_text=raw_text,
    )
    if cfg.eval.baseline not in (None, "chroma", "template"):
        raise ConfigError(f"unknown baseline {cfg.eval.baseline!r}")
    _network_config(dict(sections["network"]))  # reject bad network keys early
    return cfg


def _capture_config(cfg: RunConfig, out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(
        cfg.raw_text if cfg.raw_text is not None else yaml.safe_dump(resolved, sort_keys=False))
    (out_dir / "config_resolved.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))


def _resolve_data(cfg: RunConfig, args) -> tuple[Path, Path]:
    manifest = getattr(args, "manifest", None) or cfg.data.manifest
    if manifest is None:
        raise ConfigError("no manifest given (data.manifest or --manifest)")
    manifest = Path(manifest)
    root = getattr(args, "audio_root", None) or cfg.data.audio_root or manifest.parent
    return manifest, Path(root)


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    overrides = {"synth": {"n_tracks": args.n_tracks, "duration": args.duration,
                           "seed": args.seed, "sample_rate": args.sample_rate}}
    cfg = load_run_config(args.config, overrides)
    out = Path(args.out)
    manifest = synthesize_corpus(cfg.synth, out)
    print(f"wrote {len(manifest.entries)} tracks under {out}")
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"train": {"mode": args.mode, "epochs": args.epochs, "seed": args.seed,
                           "omega": args.omega, "batch_size": args.batch_size,
                           "label_fraction": args.label_fraction}}
    cfg = load_run_config(args.config, overrides)
    manifest_path, audio_root = _resolve_data(cfg, args)
    manifest = load_manifest(manifest_path)
    net_cfg = cfg.network(mode=cfg.train.mode)
    out_dir = Path(args.out)
    _capture_config(cfg, out_dir, {
        "data": {"manifest": str(manifest_path), "audio_root": str(audio_root)},
        "cqt": dataclasses.asdict(cfg.cqt),
        "network": dataclasses.asdict(net_cfg),
        "train": dataclasses.asdict(cfg.train),
    })
    result = train(cfg.train, net_cfg, cfg.cqt, manifest, audio_root, out_dir,
                   resume=args.resume, progress=not args.quiet)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.loss_log_path}")
    if result.entropy_bits is not None:
        print(f"class entropy: {result.entropy_bits:.3f} bits")
    if result.collapsed:
        print("error: training collapsed (class entropy below threshold)",
              file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_run_config(args.config)
    bundle = load_checkpoint(args.checkpoint)
    model = model_from_bundle(bundle)
    clip = None
    if args.clip is not None:
        samples, sr = load_audio(args.clip, target_sr=cfg.cqt.sample_rate)
        from .frontend import AudioClip
        clip = AudioClip(samples, sr)
    reference = KeyLabel.from_string(args.reference)
    cal = calibrate(model, cfg.cqt, clip=clip, reference=reference,
                    segment_frames=segment_frames_from_bundle(bundle, cfg.cqt))
    bundle["calibration"] = dataclasses.asdict(cal)
    import torch
    torch.save(bundle, args.checkpoint)
    print(f"q_cal: {cal.q_cal}  mode_swap: {cal.mode_swap}")
    print(f"calibration stored in {args.checkpoint}")
    return EXIT_OK


def _counts_only_eval(args) -> int:
    parts = [p for p in args.from_counts.replace(" ", "").split(",") if p]
    try:
        values = [int(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"--from-counts needs integers: {e}") from None
    if len(values) == 2:
        if args.total is None:
            raise ConfigError("--from-counts with 2 values (correct,fifth) needs --total")
        score = ksea_score(values[0], values[1], args.total)
        print(f"KSEA: {score:.3f}%")
    elif len(values) == 5:
        counts = EvalCounts(*values)
        if args.total is not None and args.total != counts.total:
            raise ConfigError(
                f"--total {args.total} does not match the count sum {counts.total}")
        print(f"MIREX: {mirex_score(counts):.3f}%")
    else:
        raise ConfigError("--from-counts takes 2 (KSEA) or 5 (MIREX) integers")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.from_counts is not None:
        return _counts_only_eval(args)
    cfg = load_run_config(args.config)
    baseline = args.baseline or cfg.eval.baseline
    fifth_both = args.fifth_both_directions or cfg.eval.fifth_both_directions
    manifest_path, audio_root = _resolve_data(cfg, args)
    manifest = load_manifest(manifest_path)
    model = cal = None
    segment_frames = None
    if baseline is None:
        if args.checkpoint is None:
            raise ConfigError("model evaluation needs --checkpoint (or pick --baseline)")
        bundle = load_checkpoint(args.checkpoint)
        model = model_from_bundle(bundle)
        if bundle.get("calibration") is None:
            raise ConfigError(
                "checkpoint has no stored calibration; run `cofkey calibrate` first")
        cal = CalibrationState(**bundle["calibration"])
        segment_frames = segment_frames_from_bundle(bundle, cfg.cqt)
    report = evaluate_manifest(model, cal, manifest, audio_root, cfg.cqt,
                               Path(args.out), baseline=baseline,
                               fifth_both_directions=fifth_both,
                               segment_frames=segment_frames)
    print(f"n:     {report.n}")
    print(f"KSEA:  {report.ksea_percent:.3f}%")
    print(f"MIREX: {report.mirex_percent:.3f}%")
    print(f"reports under {Path(args.out)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cofkey",
        description="Self-supervised key-signature and key estimation.")
    parser.add_argument("--version", action="version", version=f"cofkey {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n-tracks", type=int, dest="n_tracks")
    p.add_argument("--duration", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--sample-rate", type=int, dest="sample_rate")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--audio-root", dest="audio_root")
    p.add_argument("--mode", choices=("ssl12", "ssl24", "supervised", "alternating"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--omega", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--resume")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="anchor a trained model's rotation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--clip", help="audio file in a known key (default: built-in scale)")
    p.add_argument("--reference", default="C:maj", help="key of the clip")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="score predictions against labels")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--audio-root", dest="audio_root")
    p.add_argument("--baseline", choices=("chroma", "template"))
    p.add_argument("--fifth-both-directions", action="store_true",
                   dest="fifth_both_directions")
    p.add_argument("--from-counts", dest="from_counts",
                   help="score from counts: correct,fifth (with --total) or "
                        "same,fifth,relative,parallel,other")
    p.add_argument("--total", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError, TrainingError, CheckpointError,
            ObjectiveError, NetworkError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, AudioIOError, CqtError, EvaluationError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
