"""Command-line entry point: preprocessing, synthetic corpora, training,
verification, spectrum inspection, ablations, and 2D projections.

All subcommands are driven by one JSON config with ``model``, ``train``,
``data``, and ``synth`` sections; ``--set section.key=value`` overrides
individual entries after loading. Every run writes a ``run_manifest.json``
(config hash, seed, package/library versions) next to its outputs, and all
file outputs are written atomically. Exit codes: 0 success, 1 validation
error, 2 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from . import audio
from . import evaluation as ev
from . import features as ft
from . import koopman as kp
from . import model as md
from . import synth
from . import training as tr
from .autodiff import no_grad

logger = logging.getLogger(__name__)

VALIDATION_ERRORS = (ValueError, FileNotFoundError, NotADirectoryError, KeyError)
NUMERIC_ERRORS = (
    ArithmeticError,
    RuntimeError,
    np.linalg.LinAlgError,
)

DEFAULT_CONFIG = {
    "model": {},
    "train": {},
    "data": {"manifest": "", "train_frac": 0.8, "val_frac": 0.1},
    "synth": {
        "n_classes": 8,
        "utts_per_class": 40,
        "t_frames": 128,
        "envelope_scale": synth.ENVELOPE_SCALE,
        "envelope_offset_scale": synth.ENVELOPE_OFFSET_SCALE,
        "bump_scale": synth.BUMP_SCALE,
        "amp_spread": synth.BUMP_AMP_SPREAD,
        "jitter_scale": synth.JITTER_SCALE,
    },
}


# -- config handling ---------------------------------------------------------------


def load_config(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    for section, values in loaded.items():
        if section not in config:
            raise ValueError(
                f"unknown config section {section!r}; "
                f"expected one of {sorted(config)}"
            )
        if not isinstance(values, dict):
            raise ValueError(f"config section {section!r} must be an object")
        config[section].update(values)
    return config


def parse_override(text):
    """'section.key=value' with a JSON-parsed value ('7' -> 7, 'x' -> 'x')."""
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    parts = dotted.split(".")
    if len(parts) != 2 or not all(parts):
        raise ValueError(f"override key {dotted!r} must be a section.key path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


def apply_overrides(config, overrides):
    for text in overrides:
        section, key, value = parse_override(text)
        if section not in config:
            raise ValueError(
                f"override targets unknown section {section!r}; "
                f"expected one of {sorted(config)}"
            )
        config[section][key] = value
    return config


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def model_config_from(config):
    section = dict(config["model"])
    fields = {f.name for f in dataclasses.fields(md.ModelConfig)}
    unknown = set(section) - fields
    if unknown:
        raise md.ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
    return md.ModelConfig(**section)


def train_config_from(config, seed=None):
    section = dict(config["train"])
    if seed is not None:
        section["seed"] = seed
    fields = {f.name for f in dataclasses.fields(tr.TrainConfig)}
    unknown = set(section) - fields
    if unknown:
        raise md.ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
    return tr.TrainConfig(**section)


# -- output plumbing ---------------------------------------------------------------


def atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_run_manifest(out_dir, command, config, seed):
    payload = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "dksd": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    write_json(os.path.join(out_dir, "run_manifest.json"), payload)


def csv_text(header, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


@contextlib.contextmanager
def output_lock(out_dir):
    """Exclusive lock file so two trainers cannot share an output directory."""
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValueError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock_path} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(lock_path)


def split_dataset(config, utterances):
    by_id = {u.utterance_id: u for u in utterances}
    records = [
        ft.UtteranceRecord(u.utterance_id, u.speaker_id, "") for u in utterances
    ]
    train_recs, val_recs, test_recs = synth.split_records(
        records,
        train_frac=config["data"]["train_frac"],
        val_frac=config["data"]["val_frac"],
    )
    pick = lambda recs: [by_id[r.utterance_id] for r in recs]
    return pick(train_recs), pick(val_recs), pick(test_recs)


def load_manifest_utterances(manifest_path):
    if not manifest_path:
        raise ValueError("config data.manifest is empty; point it at a manifest.tsv")
    return ft.load_dataset(manifest_path)


# -- subcommands -------------------------------------------------------------------


def cmd_preprocess(args):
    records = ft.read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(os.path.join(args.out, "features"), exist_ok=True)
    out_records, silent = [], []
    window_length = int(round(ft.WINDOW_SECONDS * audio.TARGET_RATE))
    for rec in records:
        wav_path = rec.path
        if not os.path.isabs(wav_path):
            wav_path = os.path.join(root, wav_path)
        waveform = audio.read_wav(wav_path)  # resamples 48 kHz sources
        voiced = audio.extract_voiced(waveform, aggressiveness=args.vad_level)
        if voiced.samples.size < window_length:
            silent.append(rec.utterance_id)
            continue
        spectrogram = ft.compute_log_mel(voiced)
        rel_path = os.path.join("features", f"{rec.utterance_id}.feat")
        ft.save_features(os.path.join(args.out, rel_path), spectrogram)
        out_records.append(
            ft.UtteranceRecord(rec.utterance_id, rec.speaker_id, rel_path)
        )
    if silent:
        raise ValueError(
            f"no voiced audio long enough for one analysis window in: {silent}"
        )
    ft.write_manifest(os.path.join(args.out, "manifest.tsv"), out_records)
    write_run_manifest(args.out, "preprocess", {"vad_level": args.vad_level}, None)
    print(f"wrote {len(out_records)} feature caches to {args.out}")
    return 0


def cmd_synth(args):
    config = apply_overrides(load_config(args.config), args.set)
    section = config["synth"]
    synth.generate_synthetic_corpus(
        n_classes=section["n_classes"],
        utts_per_class=section["utts_per_class"],
        t_frames=section["t_frames"],
        seed=args.seed,
        out_dir=args.out,
        envelope_scale=section["envelope_scale"],
        envelope_offset_scale=section["envelope_offset_scale"],
        bump_scale=section["bump_scale"],
        amp_spread=section["amp_spread"],
        jitter_scale=section["jitter_scale"],
    )
    write_run_manifest(args.out, "synth", config, args.seed)
    n = section["n_classes"] * section["utts_per_class"]
    print(f"wrote {n} synthetic utterances to {args.out}")
    return 0


def cmd_train(args):
    config = apply_overrides(load_config(args.config), args.set)
    model_cfg = model_config_from(config)
    train_cfg = train_config_from(config, seed=args.seed)
    utterances = load_manifest_utterances(config["data"]["manifest"])
    train_set, val_set, _ = split_dataset(config, utterances)

    os.makedirs(args.out, exist_ok=True)
    with output_lock(args.out):
        if args.resume:
            params, ckpt_cfg, _ = md.load_checkpoint(args.resume)
            if ckpt_cfg != model_cfg:
                raise ValueError(
                    f"--resume checkpoint was built for a different model config "
                    f"({args.resume})"
                )
        else:
            params, _ = md.build_model(model_cfg, seed=train_cfg.seed)
        result, history = tr.train(
            params,
            model_cfg,
            train_cfg,
            train_set,
            val_set,
            checkpoint_path=os.path.join(args.out, "checkpoint.ckpt"),
            history_path=os.path.join(args.out, "history.csv"),
        )
        write_run_manifest(args.out, "train", config, train_cfg.seed)
    print(
        f"trained {result.epochs_run} epochs; best epoch {result.epoch} "
        f"({result.phase}) val loss {result.val_total:.6g}"
    )
    return 0


def _load_verify_inputs(args):
    manifest = args.manifest
    if manifest is None:
        if args.trials is None:
            raise ValueError("verify needs --manifest and/or --trials")
        # trial-only invocation: the manifest is expected beside the trial list
        manifest = os.path.join(
            os.path.dirname(os.path.abspath(args.trials)), "manifest.tsv"
        )
        if not os.path.exists(manifest):
            raise FileNotFoundError(
                f"--trials given without --manifest, and no manifest.tsv "
                f"next to {args.trials}"
            )
    utterances = ft.load_dataset(manifest)
    trial_set = ev.read_trials(args.trials) if args.trials else None
    return utterances, trial_set


def cmd_verify(args):
    params, model_cfg, _ = md.load_checkpoint(args.checkpoint)
    utterances, trial_set = _load_verify_inputs(args)
    result, trials = ev.verify(
        params, model_cfg, utterances, args.branch, seed=args.seed,
        trial_set=trial_set,
    )
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "eer": result.eer,
        "threshold": result.threshold,
        "branch": args.branch,
        "n_genuine": trials.n_genuine,
        "n_impostor": trials.n_impostor,
        "pooling": ev.POOLING_METHOD,
        "seed": args.seed,
        "checkpoint": os.path.basename(args.checkpoint),
        "config_hash": config_hash(model_cfg.to_dict()),
    }
    write_json(os.path.join(args.out, f"results_{args.branch}.json"), payload)
    curve_rows = [
        (f"{e:.10g}", f"{far:.10g}", f"{frr:.10g}")
        for (e, far), (_, frr) in zip(result.far_curve, result.frr_curve)
    ]
    atomic_write_text(
        os.path.join(args.out, f"curves_{args.branch}.csv"),
        csv_text(["threshold", "far", "frr"], curve_rows),
    )
    if not args.trials:
        ev.write_trials(os.path.join(args.out, f"trials_{args.branch}.tsv"), trials)
    write_run_manifest(args.out, "verify", model_cfg.to_dict(), args.seed)
    print(f"{args.branch} EER {result.eer:.2f}% at threshold {result.threshold:.4f}")
    return 0


def cmd_spectrum(args):
    params, model_cfg, _ = md.load_checkpoint(args.checkpoint)
    utterances = ft.load_dataset(args.manifest)
    crop = min(u.features.shape[0] for u in utterances)
    with no_grad():
        batch = np.stack([u.features[:crop] for u in utterances])
        latents = md.encode_dynamics(batch, params, model_cfg)
        pair, _ = kp.batch_snapshots(latents, model_cfg.m_steps)
        operator = kp.estimate_koopman(pair, model_cfg.ridge_lambda)
    report = kp.format_spectrum_report(kp.spectrum_report(operator))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "spectrum.tsv"), report)
    write_run_manifest(args.out, "spectrum", model_cfg.to_dict(), None)
    print(report, end="")
    return 0


def cmd_ablate(args):
    config = apply_overrides(load_config(args.config), args.set)
    model_cfg = model_config_from(config)
    train_cfg = train_config_from(config, seed=args.seed)
    utterances = load_manifest_utterances(config["data"]["manifest"])
    train_set, val_set, test_set = split_dataset(config, utterances)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not seeds:
        raise ValueError("--seeds must list at least one integer")

    if args.mode == "horizon":
        m_values = [int(m) for m in args.m_list.split(",") if m]
        if not m_values:
            raise ValueError("--m-list must list at least one horizon")
        rows = ev.ablate_horizon(
            model_cfg, train_cfg, train_set, val_set, test_set, m_values, seeds
        )
    else:
        rows = ev.ablate_losses(
            model_cfg, train_cfg, train_set, val_set, test_set, seeds
        )

    os.makedirs(args.out, exist_ok=True)
    payload = [dataclasses.asdict(row) for row in rows]
    write_json(os.path.join(args.out, "ablation.json"), payload)
    header = ["label", "speaker_eer_mean", "speaker_eer_std", "content_eer_mean"]
    table_lines = ["\t".join(header)]
    table_lines.extend(
        f"{row.label}\t{row.speaker_eer_mean:.4f}\t{row.speaker_eer_std:.4f}"
        f"\t{row.content_eer_mean:.4f}"
        for row in rows
    )
    atomic_write_text(
        os.path.join(args.out, "ablation.tsv"), "\n".join(table_lines) + "\n"
    )
    write_run_manifest(args.out, "ablate", config, args.seed)
    for row in rows:
        print(
            f"{row.label}: speaker EER {row.speaker_eer_mean:.2f}% "
            f"± {row.speaker_eer_std:.2f} (content {row.content_eer_mean:.2f}%)"
        )
    return 0


def cmd_project(args):
    params, model_cfg, _ = md.load_checkpoint(args.checkpoint)
    utterances = ft.load_dataset(args.manifest)
    speaker_of = {u.utterance_id: u.speaker_id for u in utterances}
    embeddings = ev.embed_utterances(params, model_cfg, utterances, args.branch)
    coords = ev.project_2d(embeddings)
    rows = [
        (uid, speaker_of[uid], f"{x:.10g}", f"{y:.10g}") for uid, x, y in coords
    ]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(
        args.out, csv_text(["utterance_id", "speaker_id", "x", "y"], rows)
    )
    write_run_manifest(out_dir, "project", model_cfg.to_dict(), None)
    print(f"wrote {len(rows)} projected points to {args.out}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dksd",
        description=__doc__.splitlines()[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name, help_text):
        p = sub.add_parser(
            name,
            help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        return p

    p = add("preprocess", "VAD + log-mel feature extraction for a WAV manifest")
    p.add_argument("--manifest", required=True, help="TSV of (utterance_id, speaker_id, wav path)")
    p.add_argument("--out", required=True, help="output directory for feature caches")
    p.add_argument("--vad-level", type=int, default=1, choices=range(4),
                   help="VAD aggressiveness")
    p.set_defaults(run=cmd_preprocess)

    p = add("synth", "generate the synthetic two-timescale corpus")
    p.add_argument("--config", required=True, help="JSON config with a synth section")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override (repeatable)")
    p.set_defaults(run=cmd_synth)

    p = add("train", "two-phase training on a feature manifest")
    p.add_argument("--config", required=True, help="JSON config (model/train/data)")
    p.add_argument("--out", required=True, help="output directory for checkpoint/history")
    p.add_argument("--seed", type=int, default=None,
                   help="training seed (default: train.seed from the config)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override (repeatable)")
    p.set_defaults(run=cmd_train)

    p = add("verify", "speaker-verification EER for one branch")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", default=None, help="feature manifest of the test set")
    p.add_argument("--trials", default=None,
                   help="explicit trial list TSV (default: built from the manifest)")
    p.add_argument("--branch", required=True, choices=ev.BRANCHES,
                   help="which latent branch to score")
    p.add_argument("--seed", type=int, default=0, help="impostor-sampling seed")
    p.add_argument("--out", default=".", help="directory for results JSON/curves")
    p.set_defaults(run=cmd_verify)

    p = add("spectrum", "Koopman eigenvalue table for a manifest batch")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", required=True, help="feature manifest")
    p.add_argument("--out", default=".", help="directory for spectrum.tsv")
    p.set_defaults(run=cmd_spectrum)

    p = add("ablate", "horizon or loss ablation sweep")
    p.add_argument("--config", required=True, help="JSON config (model/train/data)")
    p.add_argument("--m-list", default="1,5", help="comma-separated horizons")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--mode", default="horizon", choices=("horizon", "losses"),
                   help="sweep dimension")
    p.add_argument("--seed", type=int, default=None,
                   help="base training seed (default: train.seed from the config)")
    p.add_argument("--out", default=".", help="directory for the ablation table")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path config override (repeatable)")
    p.set_defaults(run=cmd_ablate)

    p = add("project", "2D PCA projection of branch embeddings")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--manifest", required=True, help="feature manifest")
    p.add_argument("--branch", required=True, choices=ev.BRANCHES,
                   help="which latent branch to project")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(run=cmd_project)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; those are validation failures here
        return 0 if exc.code == 0 else 1
    try:
        return args.run(args)
    except NUMERIC_ERRORS as exc:
        print(f"error (numeric): {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
