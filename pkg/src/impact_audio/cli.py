"""Command-line entry point exposing the full pipeline.

Subcommands: ingest, synth, pretrain, embed, probe, analyze, selftest.
Every run takes a JSON config (optional) plus flag overrides (flags
win), validates everything up front, and writes `effective_config.json`
(values + per-field provenance) and `versions.txt` into the output
directory. Exit codes: 0 success, 1 invalid configuration/arguments,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .audio_io import (
    ingest_recording,
    load_manifest,
    read_audio,
    save_manifest,
    write_audio,
    Manifest,
    ManifestEntry,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .dsp import SpectrogramParams, log_mel, mean_spectrum, save_mean_spectrum_csv
from .errors import ConfigError, ImpactError
from .model import ModelConfig
from .probe_bench import LabeledEmbeddingSet, ProbeConfig, run_benchmark, write_reports
from .ssl_train import (
    ModelState,
    TrainConfig,
    Embedding,
    embed as embed_spec,
    ema_update,
    pretrain,
    sample_mask,
    total_loss,
)
from .synthgen import PRESETS, make_corpus, spec_from_json

COMMANDS = ("ingest", "synth", "pretrain", "embed", "probe", "analyze", "selftest")

MODEL_SCALES = {
    "default": ModelConfig,
    "quarter": ModelConfig.quarter,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(f"{message}\n\n{self.format_usage()}")


# --- configuration merging -----------------------------------------------------

def _section_defaults() -> dict:
    train = dataclasses.asdict(TrainConfig())
    train.pop("seed")  # the root seed is the only seed knob
    probe = dataclasses.asdict(ProbeConfig())
    probe.pop("seed")
    model = {field.name: None for field in dataclasses.fields(ModelConfig)}
    return {
        "seed": 0,
        "threads": 0,  # 0 = leave torch default
        "dsp": dataclasses.asdict(SpectrogramParams()),
        "model": {"scale": "default", **model},
        "train": train,
        "probe": {
            **probe,
            "n_repeats": 10,
            "train_fraction": 0.2,
            "pooling": "mean",
        },
    }


class RunConfig:
    """Merged configuration with per-field provenance (default|file|flag)."""

    def __init__(self):
        self.values = _section_defaults()
        self.provenance = {
            path: "default" for path in self._walk(self.values)
        }

    @staticmethod
    def _walk(tree, prefix=""):
        for key, value in tree.items():
            path = f"{prefix}{key}"
            if isinstance(value, dict):
                yield from RunConfig._walk(value, path + ".")
            else:
                yield path

    def _set(self, path: str, value, source: str):
        node = self.values
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown config section {part!r} in {path}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {path!r}")
        node[parts[-1]] = value
        self.provenance[path] = source

    def apply_file(self, path):
        try:
            tree = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for field_path, value in self._flatten(tree):
            self._set(field_path, value, "file")

    @staticmethod
    def _flatten(tree, prefix=""):
        for key, value in tree.items():
            path = f"{prefix}{key}"
            if isinstance(value, dict):
                yield from RunConfig._flatten(value, path + ".")
            else:
                yield path, value

    def apply_flag(self, path: str, value):
        if value is not None:
            self._set(path, value, "flag")

    def spectrogram_params(self) -> SpectrogramParams:
        raw = dict(self.values["dsp"])
        try:
            return SpectrogramParams(**raw)
        except ConfigError as exc:
            raise ConfigError(f"dsp: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"dsp: {exc}") from exc

    def model_config(self) -> ModelConfig:
        raw = dict(self.values["model"])
        scale = raw.pop("scale", "default")
        if scale not in MODEL_SCALES:
            raise ConfigError(f"model.scale must be one of {sorted(MODEL_SCALES)}, got {scale}")
        base = dataclasses.asdict(MODEL_SCALES[scale]())
        base.update({k: v for k, v in raw.items() if v is not None})
        base["decoder_channels"] = tuple(base["decoder_channels"])
        try:
            return ModelConfig(**base)
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def train_config(self) -> TrainConfig:
        raw = dict(self.values["train"])
        raw["seed"] = self.values["seed"]
        try:
            return TrainConfig(**raw)
        except TypeError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def probe_config(self) -> ProbeConfig:
        raw = dict(self.values["probe"])
        raw.pop("n_repeats", None)
        raw.pop("train_fraction", None)
        raw.pop("pooling", None)
        raw["seed"] = self.values["seed"]
        try:
            return ProbeConfig(**raw)
        except TypeError as exc:
            raise ConfigError(f"probe: {exc}") from exc

    def validate(self):
        self.spectrogram_params()
        self.model_config()
        self.train_config()
        self.probe_config()
        repeats = self.values["probe"]["n_repeats"]
        if not isinstance(repeats, int) or repeats < 1:
            raise ConfigError(f"probe.n_repeats must be a positive integer, got {repeats}")
        fraction = self.values["probe"]["train_fraction"]
        if not (0.0 < fraction < 1.0):
            raise ConfigError(f"probe.train_fraction must be in (0, 1), got {fraction}")
        if self.values["probe"]["pooling"] not in ("mean", "cls", "cls+mean"):
            raise ConfigError(f"probe.pooling must be mean|cls|cls+mean")


def build_run_config(args) -> RunConfig:
    config = RunConfig()
    if getattr(args, "config", None):
        config.apply_file(args.config)
    for flag, path in (
        ("seed", "seed"),
        ("threads", "threads"),
        ("epochs", "train.epochs"),
        ("batch_size", "train.batch_size"),
        ("learning_rate", "train.learning_rate"),
        ("mask_ratio", "train.mask_ratio"),
        ("lambda_u", "train.lambda_u"),
        ("ema_decay", "train.ema_decay"),
        ("frame_loss_scope", "train.frame_loss_scope"),
        ("scale", "model.scale"),
        ("repeats", "probe.n_repeats"),
        ("hidden_units", "probe.hidden_units"),
        ("train_fraction", "probe.train_fraction"),
        ("pooling", "probe.pooling"),
        ("no_standardize", None),
    ):
        if path is None:
            continue
        if hasattr(args, flag):
            config.apply_flag(path, getattr(args, flag))
    if getattr(args, "no_standardize", False):
        config.apply_flag("dsp.standardize", False)
    if getattr(args, "linear_only", False):
        config.apply_flag("probe.linear_only", True)
    config.validate()
    return config


# --- run directory plumbing ------------------------------------------------------

def prepare_out_dir(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_metadata(out_dir: Path, config: RunConfig, command: str):
    payload = {
        "command": command,
        "config": config.values,
        "provenance": config.provenance,
    }
    (out_dir / "effective_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    versions = [
        f"impact-audio {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"torch {torch.__version__}",
    ]
    (out_dir / "versions.txt").write_text("\n".join(versions) + "\n", encoding="utf-8")


def apply_threads(config: RunConfig):
    threads = config.values["threads"]
    if not threads:
        threads = int(os.environ.get("IMPACT_THREADS", "0") or 0)
    if threads > 0:
        torch.set_num_threads(threads)


# --- subcommands ---------------------------------------------------------------------

def cmd_ingest(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "ingest")
    apply_threads(config)

    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    params = config.spectrogram_params()
    entries = []
    total = 0
    for entry in manifest.entries:
        clip = read_audio(base / entry.path)
        clips = ingest_recording(clip, params.sample_rate_hz, window_s=1.0)
        stem = Path(entry.path).stem
        for i, piece in enumerate(clips):
            name = f"{stem}_{i:04d}.wav"
            write_audio(piece, out_dir / name, encoding="float32")
            entries.append(ManifestEntry(name, entry.machine, entry.class_id, entry.sensor))
            total += 1
    save_manifest(Manifest(entries), out_dir / "index.csv")
    print(f"ingested {len(manifest)} recordings into {total} clips at {out_dir}")
    return 0


def cmd_synth(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "synth")

    if args.spec_json:
        text = Path(args.spec_json).read_text(encoding="utf-8")
        raw = json.loads(text)
        specs = [(name, spec_from_json(json.dumps(body))) for name, body in raw.items()]
    else:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
        specs = PRESETS[args.preset]()
    manifest = make_corpus(
        specs,
        args.clips,
        out_dir,
        base_seed=config.values["seed"],
        duration_s=args.duration,
        jitter=not args.no_jitter,
    )
    print(f"wrote {len(manifest)} clips across {len(specs)} classes to {out_dir}")
    return 0


def _load_clip_specs(data_dir, params: SpectrogramParams):
    paths = sorted(Path(data_dir).glob("*.wav"))
    if not paths:
        raise ConfigError(f"no .wav files found in {data_dir}")
    specs, ids = [], []
    for path in paths:
        clip = read_audio(path)
        specs.append(log_mel(clip, params))
        ids.append(path.stem)
    return specs, ids


def cmd_pretrain(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "pretrain")
    apply_threads(config)

    params = config.spectrogram_params()
    train_config = config.train_config()
    model_config = config.model_config()

    t0 = time.time()
    specs, _ = _load_clip_specs(args.data, params)
    print(f"loaded {len(specs)} clips ({time.time() - t0:.1f}s)")

    state, curve = pretrain(
        specs,
        train_config,
        model_config,
        out_dir=out_dir / "checkpoints",
        log=print,
    )
    with open(out_dir / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "frame_loss", "utt_loss", "total_loss"])
        for row in curve:
            writer.writerow(
                [row["epoch"], f"{row['frame_loss']:.8f}",
                 f"{row['utt_loss']:.8f}", f"{row['total_loss']:.8f}"]
            )
    save_checkpoint(
        out_dir / "final.ckpt",
        state.student,
        state.teacher,
        epoch=state.epoch,
        train_config=train_config,
        optimizer=state.optimizer,
    )
    print(f"pretraining done in {time.time() - t0:.1f}s; final checkpoint at {out_dir / 'final.ckpt'}")
    return 0


def _write_embeddings_csv(path, embeddings: list[Embedding]):
    dim = embeddings[0].vector.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id"] + [f"dim{i}" for i in range(dim)])
        for emb in embeddings:
            writer.writerow([emb.clip_id] + [f"{v:.8f}" for v in emb.vector])


def _read_embeddings_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "clip_id":
            raise ConfigError(f"{path}: expected a clip_id,dim0.. header")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.asarray(rows)


def cmd_embed(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "embed")
    apply_threads(config)

    student, teacher, header, _ = load_checkpoint(args.ckpt)
    state = ModelState(student=student, teacher=teacher, epoch=header["epoch"])
    params = config.spectrogram_params()
    specs, ids = _load_clip_specs(args.data, params)
    pooling = config.values["probe"]["pooling"]
    embeddings = [
        embed_spec(spec, state, pooling, clip_id, branch=args.branch)
        for spec, clip_id in zip(specs, ids)
    ]
    _write_embeddings_csv(out_dir / "embeddings.csv", embeddings)
    print(f"wrote {len(embeddings)} embeddings to {out_dir / 'embeddings.csv'}")
    return 0


def cmd_probe(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "probe")
    apply_threads(config)

    ids, matrix = _read_embeddings_csv(args.embeddings)
    manifest = load_manifest(args.manifest)
    by_id = {Path(e.path).stem: e for e in manifest.entries}
    missing = [cid for cid in ids if cid not in by_id]
    if missing:
        raise ConfigError(f"{len(missing)} embedding ids missing from manifest, e.g. {missing[:3]}")

    machines: dict[str, dict] = {}
    for row, cid in enumerate(ids):
        entry = by_id[cid]
        bucket = machines.setdefault(entry.machine, {"rows": [], "labels": []})
        bucket["rows"].append(matrix[row])
        bucket["labels"].append(entry.class_id)
    sets = [
        LabeledEmbeddingSet(np.vstack(bucket["rows"]), bucket["labels"], machine)
        for machine, bucket in machines.items()
    ]
    reports = run_benchmark(
        sets,
        n_repeats=config.values["probe"]["n_repeats"],
        base_seed=config.values["seed"],
        probe_config=config.probe_config(),
        train_fraction=config.values["probe"]["train_fraction"],
    )
    write_reports(reports, out_dir)
    for machine, report in reports.items():
        mean, std = report.machine_f1
        print(f"{machine}: macro F1 {mean:.4f} +- {std:.4f} over {report.n_repeats} repeats")
    return 0


def cmd_analyze(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force)
    write_run_metadata(out_dir, config, "analyze")

    clip = read_audio(getattr(args, "in"))
    spectrum = mean_spectrum(clip)
    save_mean_spectrum_csv(spectrum, out_dir / "mean_spectrum.csv")
    peak = int(np.argmax(spectrum.mean_db))
    print(
        f"mean spectrum over {clip.samples.size // 2048} segments; "
        f"peak at bin {peak} ({spectrum.freqs_hz[peak]:.1f} Hz)"
    )
    return 0


def cmd_selftest(args) -> int:
    config = build_run_config(args)
    out_dir = prepare_out_dir(args.out, args.force) if args.out else None
    if out_dir is not None:
        write_run_metadata(out_dir, config, "selftest")
    apply_threads(config)
    return run_selftest(verbose=True)


def run_selftest(verbose: bool = True) -> int:
    """End-to-end micro pipeline; prints one line per check."""
    import tempfile

    from .synthgen import coldspray4_preset, synth_clip

    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")

    params = SpectrogramParams()
    spec = log_mel(synth_clip(coldspray4_preset()[0][1], 1.0, 48000, rng=0), params)
    check("spectrogram shape 128x128", spec.shape == (128, 128))

    masks = [sample_mask(16, 0.7, np.random.default_rng(s)) for s in range(100)]
    check("mask count 11 of 16", all(int(m.sum()) == 11 for m in masks))
    check("loss algebra", abs(total_loss(1.0, 2.0, 0.1) - 1.2) < 1e-12)

    small = ModelConfig(
        input_size=128, cnn_channels=8, patch_size=16, embed_dim=64,
        n_layers=2, n_heads=4, decoder_proj_dim=128,
        decoder_channels=(32, 32, 16, 8, 8, 1),
    )
    corpus = []
    labels = []
    for class_idx, (name, machine_spec) in enumerate(coldspray4_preset()):
        for j in range(6):
            clip = synth_clip(machine_spec, 1.0, 48000, rng=np.random.default_rng(1000 * class_idx + j))
            corpus.append(log_mel(clip, params))
            labels.append(name)

    train_config = TrainConfig(epochs=2, batch_size=8, seed=0)
    state, curve = pretrain(corpus, train_config, small)
    check("pretraining produced finite losses", all(np.isfinite(row["total_loss"]) for row in curve))

    snapshot = {k: v.clone() for k, v in state.student.state_dict().items()}
    ema_update(state.teacher, state.student, 0.0)
    same = all(
        torch.equal(v, snapshot[k])
        for k, v in state.teacher.state_dict().items()
    )
    check("EMA decay-0 copies student", same)

    vectors = [embed_spec(s, state).vector for s in corpus]
    again = [embed_spec(s, state).vector for s in corpus[:3]]
    check("embedding determinism", all(np.array_equal(a, b) for a, b in zip(vectors[:3], again)))

    data = LabeledEmbeddingSet(np.vstack(vectors), labels, "selftest")
    reports = run_benchmark([data], n_repeats=3, base_seed=0,
                            probe_config=ProbeConfig(epochs=100))
    f1 = reports["selftest"].machine_f1[0]
    check(f"probe macro F1 {f1:.3f} above chance", f1 > 0.4)

    failed = [name for name, ok in checks if not ok]
    if verbose:
        print(f"selftest: {len(checks) - len(failed)}/{len(checks)} checks passed")
    return 0 if not failed else 2


# --- argument parsing ----------------------------------------------------------------

def _add_common(sub, out_required=True):
    sub.add_argument("--out", required=out_required, help="output directory for this run")
    sub.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    sub.add_argument("--config", help="JSON configuration file")
    sub.add_argument("--seed", type=int, help="root seed for all module rngs")
    sub.add_argument("--threads", type=int, help="worker/thread cap (env IMPACT_THREADS)")


def build_parser() -> _Parser:
    parser = _Parser(prog="impact", description=__doc__)
    subs = parser.add_subparsers(dest="command")

    p = subs.add_parser("ingest", help="normalize and segment recordings from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="CSV with path,machine,class,sensor")
    p.add_argument("--no-standardize", action="store_true")

    p = subs.add_parser("synth", help="generate a labeled synthetic corpus")
    _add_common(p)
    p.add_argument("--preset", default="coldspray4")
    p.add_argument("--spec-json", help="JSON file of {class: machine spec} overriding the preset")
    p.add_argument("--clips", type=int, default=50, help="clips per class")
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--no-jitter", action="store_true")

    p = subs.add_parser("pretrain", help="self-supervised pretraining on a clip directory")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory of 1-second 48 kHz wav clips")
    p.add_argument("--scale", choices=sorted(MODEL_SCALES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--lambda-u", dest="lambda_u", type=float)
    p.add_argument("--ema-decay", dest="ema_decay", type=float)
    p.add_argument("--frame-loss-scope", dest="frame_loss_scope", choices=("masked", "all"))
    p.add_argument("--no-standardize", action="store_true")

    p = subs.add_parser("embed", help="extract frozen-encoder embeddings")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pooling", choices=("mean", "cls", "cls+mean"))
    p.add_argument("--branch", choices=("student", "teacher"), default="student")

    p = subs.add_parser("probe", help="linear-probe benchmark over stored embeddings")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help="CSV clip_id,dim0..")
    p.add_argument("--manifest", required=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--hidden-units", dest="hidden_units", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--linear-only", action="store_true")

    p = subs.add_parser("analyze", help="mean frequency spectrum of a recording")
    _add_common(p)
    p.add_argument("--in", required=True, help="input wav file")

    p = subs.add_parser("selftest", help="run the end-to-end invariant suite")
    _add_common(p, out_required=False)

    return parser


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "probe": cmd_probe,
    "analyze": cmd_analyze,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ImpactError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
