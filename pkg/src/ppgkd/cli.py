"""Command-line entry point: ``ppgkd {synth,ingest,train,eval,export}``.

Configuration is resolved as defaults < ``--config`` file < per-key flags.
Every training key has a flag of the same name with dashes, for example
``--teacher-epochs 5`` or ``--enable-cka false``. The effective config is
snapshotted next to the outputs together with a small run manifest.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import __version__
from .backbones import load_backbone
from .errors import ConfigError, DataError, PPGKDError
from .evaluation import enroll, eval_sample_wise, eval_subject_wise, export_embeddings
from .signals import SplitMode, SyntheticConfig, generate_synthetic, load_records, write_dataset
from .training import CHECKPOINT_NAMES, PHASES, TrainConfig, checkpoint_path, load_split, run_phase, write_config_snapshot

log = logging.getLogger("ppgkd")

ABLATION_TOGGLES = {"kd": "enable_kd", "clip": "enable_clip", "cka": "enable_cka"}
MODEL_PHASES = ("teacher", "student-baseline", "student-distill")
METRICS = {SplitMode.SAMPLE_WISE: ("oa", "f1"), SplitMode.SUBJECT_WISE: ("oa", "eer")}


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    overrides: list[str]
    seed: int
    out_dir: str
    config_hash: str
    extra: dict = field(default_factory=dict)

    def write(self, path: Path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config resolution


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat JSON object of config keys")
    group = parser.add_argument_group("config keys (override the config file)")
    defaults = TrainConfig()
    for key, typ in TrainConfig.field_types().items():
        group.add_argument(
            _flag(key),
            dest=f"cfg_{key}",
            metavar=typ.__name__.upper(),
            default=None,
            help=f"default: {getattr(defaults, key)!r}",
        )


def read_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"config file {path} must be a flat key/value object")
    return data


def resolve_config(args, extra: dict | None = None) -> tuple[TrainConfig, list[str]]:
    """Merge defaults, file and CLI flags; returns the config and the override list."""
    merged = read_config_file(args.config) if args.config else {}
    overrides = []
    for key in TrainConfig.keys():
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            merged[key] = value
            overrides.append(f"{key}={value}")
    for key, value in (extra or {}).items():
        merged[key] = value
        overrides.append(f"{key}={value}")
    return TrainConfig.from_dict(merged), overrides


def parse_ablate(text: str) -> dict[str, bool]:
    """``kd,cka`` -> enable exactly those terms; ``none`` disables all of them."""
    names = [s.strip().lower() for s in text.split(",") if s.strip()]
    if names == ["none"]:
        names = []
    unknown = sorted(set(names) - set(ABLATION_TOGGLES))
    if unknown or not text.strip():
        raise ConfigError(f"--ablate takes a subset of {sorted(ABLATION_TOGGLES)} or 'none', got {text!r}")
    return {key: name in names for name, key in ABLATION_TOGGLES.items()}


def _apply_threads(cfg: TrainConfig):
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)


def _prepare_out_dir(path: Path, force: bool):
    if path.exists() and not path.is_dir():
        raise ConfigError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _clear_dataset(path: Path):
    # only files this tool writes are removed
    for p in list(path.glob("*.f32")) + list(path.glob("manifest.csv")) + list(path.glob("run_manifest.json")):
        p.unlink()


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    _clear_dataset(out)
    cfg = SyntheticConfig(
        n_subjects=args.subjects, duration_s=args.duration, seed=args.seed, noise_sigma=args.noise
    )
    records = generate_synthetic(cfg)
    write_dataset(records, out)
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list)
    RunManifest("synth", None, [], args.seed, str(out), _sha(blob), {"synthetic": json.loads(blob)}).write(
        out / "run_manifest.json"
    )
    print(f"wrote {len(records)} records for {args.subjects} subjects to {out}")
    return 0


def cmd_ingest(args) -> int:
    records = load_records(args.src, args.manifest)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    _clear_dataset(out)
    write_dataset(records, out)
    subjects = sorted({r.subject_id for r in records})
    short = [r.subject_id for r in records if not r.meets_min_duration()]
    if short:
        log.warning("%d records are shorter than the 8 minute minimum", len(short))
    print(f"ingested {len(records)} records for {len(subjects)} subjects into {out}")
    return 0


def cmd_train(args) -> int:
    extra = parse_ablate(args.ablate) if args.ablate is not None else {}
    cfg, overrides = resolve_config(args, extra)
    _apply_threads(cfg)
    out = checkpoint_path(cfg, args.phase)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} already exists (use --force to retrain)")
    art = run_phase(args.phase, cfg)
    RunManifest(
        f"train --phase {args.phase}", args.config, overrides, cfg.seed, str(art.run_dir), art.config_hash
    ).write(art.run_dir / f"run_manifest_{args.phase}.json")
    print(f"{args.phase}: checkpoint {art.checkpoint}, trace {art.trace}")
    return 0


def _load_model(cfg: TrainConfig, args):
    path = Path(args.checkpoint) if args.checkpoint else checkpoint_path(cfg, args.model)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path} (train --phase {args.model} first)")
    model, _ = load_backbone(path)
    return model, path


def cmd_eval(args) -> int:
    cfg, overrides = resolve_config(args)
    _apply_threads(cfg)
    mode = cfg.split_mode
    wanted = [m.strip() for m in args.metrics.split(",")] if args.metrics else list(METRICS[mode])
    bad = [m for m in wanted if m not in METRICS[mode]]
    if bad:
        raise ConfigError(f"metric(s) {bad} are not defined in {mode.value} mode (available: {METRICS[mode]})")
    model, path = _load_model(cfg, args)
    split = load_split(cfg)
    if mode is SplitMode.SAMPLE_WISE:
        if split.num_classes != model.classifier.out_features:
            raise ConfigError(
                f"checkpoint has {model.classifier.out_features} classes but the split has {split.num_classes}"
            )
        report = eval_sample_wise(model, split.test, split.label_map)
    else:
        report = eval_subject_wise(model, enroll(model, split.test, cfg.n_shot))
    out = Path(args.out) if args.out else Path(cfg.run_dir) / f"report_{args.model}_{mode.value}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    write_config_snapshot(cfg, out.parent / f"config_eval_{args.model}.json")
    RunManifest("eval", args.config, overrides, cfg.seed, str(out.parent), cfg.hash(), {"checkpoint": str(path)}).write(
        out.parent / f"run_manifest_eval_{args.model}.json"
    )
    for key, value in report.metrics().items():
        if key in wanted or key in ("mode", "n_shot"):
            print(f"{key}: {value}")
    return 0


def cmd_export(args) -> int:
    cfg, _ = resolve_config(args)
    _apply_threads(cfg)
    model, _ = _load_model(cfg, args)
    split = load_split(cfg)
    segments = split.train if args.part == "train" else split.test
    out = Path(args.out) if args.out else Path(cfg.run_dir) / f"embeddings_{args.model}_{args.part}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, segments, out, model_tag=args.model)
    print(f"wrote {len(segments)} embeddings to {out}")
    return 0


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppgkd", description="ECG-to-PPG cross-modal distillation for biometrics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired ECG/PPG dataset")
    p.add_argument("--out", default="data")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--duration", type=float, default=480.0, help="seconds per record")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate a manifest-described dataset and copy it into a data directory")
    p.add_argument("--src", required=True)
    p.add_argument("--manifest", default=None, help="defaults to SRC/manifest.csv")
    p.add_argument("--out", default="data")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run one training phase")
    p.add_argument("--phase", required=True, choices=PHASES)
    p.add_argument("--ablate", default=None, help="enabled distillation terms, e.g. 'kd,cka' or 'none'")
    p.add_argument("--force", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a trained model"),
        ("export", cmd_export, "export embeddings as delimited text"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--model", choices=MODEL_PHASES, default="student-distill")
        p.add_argument("--checkpoint", default=None, help=f"overrides the run-dir checkpoint ({', '.join(CHECKPOINT_NAMES.values())})")
        p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--metrics", default=None, help="comma list; oa,f1 (sample-wise) or oa,eer (subject-wise)")
        else:
            p.add_argument("--part", choices=("train", "test"), default="test")
        add_config_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except PPGKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
