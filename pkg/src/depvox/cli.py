"""Command line entry point.

    depvox synth       --out CORPUS_DIR
    depvox features    --config CFG --features is09 --out CACHE_DIR
    depvox ge2e-train  --config CFG --out RUN_DIR
    depvox embed       --config CFG --out CACHE_DIR
    depvox train       --config CFG --arch lstm_d --features spk_emb --context 16 --out RUN_DIR
    depvox eval        --config CFG --out RUN_DIR
    depvox sweep       --config CFG --arch lstm_d --features spk_emb --out RUN_DIR

``--config`` is a JSON object; command line flags override its keys. Paths
inside the config are taken relative to the working directory. Each command
writes ``run-<command>.json`` (resolved config, seeds, package version)
next to its artifacts.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .classifiers import (ArchSpec, TrainConfig, TrainedClassifier, train_classifier, write_curves_csv)
from .corpus import SynthSpec, generate_synthetic_corpus, load_manifest
from .evaluation import context_sweep, evaluate_recordings, windows_for, write_metrics_csv
from .featstore import FeatureCache, embedding_table, segments_for, split_tables
from .features import KIND_DIMS
from .nn.checkpoint import CheckpointError

log = logging.getLogger("depvox")

ARCH_CHOICES = ["dnn_d", "cnn_d", "lstm_d", "ce_dd", "ce_dc", "ce_dl"]
FEATURE_CHOICES = ["spk_emb", "is09", "covarep"]
CACHE_KINDS = {"spk_emb": "spk_emb", "is09": "is09", "covarep": "covarep_stats"}

DEFAULTS = {
    "synth": {"seed": 0},
    "features": {"seed": 0, "corpus": None, "features": "is09", "seg_dur": 5.0},
    "ge2e-train": {"seed": 0, "corpus": None, "seg_dur": 5.0, "preset": "toy", "ge2e": {}, "eval_every": 50},
    "embed": {"seed": 0, "corpus": None, "checkpoint": None, "seg_dur": 5.0},
    "train": {"seed": 0, "corpus": None, "cache": None, "arch": "lstm_d", "features": "spk_emb",
              "features_b": "is09", "context": 16, "arch_options": {}, "train": {}},
    "eval": {"seed": 0, "corpus": None, "cache": None, "checkpoint": None},
    "sweep": {"seed": 0, "corpus": None, "cache": None, "arch": "lstm_d", "features": "spk_emb",
              "features_b": "is09", "contexts": [4, 8, 12, 16], "seeds": [0, 1, 2], "arch_options": {},
              "train": {}},
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling

def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise CliError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise CliError(f"{args.config}: invalid JSON ({e})")
        if not isinstance(loaded, dict):
            raise CliError(f"{args.config}: top level must be a JSON object")
        cfg.update(loaded)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.arch is not None:
        cfg["arch"] = args.arch
    if args.features is not None:
        # for two-branch models the flag picks the functional branch
        key = "features_b" if str(cfg.get("arch", "")).startswith("ce_") else "features"
        cfg[key] = args.features
    if args.context is not None:
        if command == "sweep":
            cfg["contexts"] = [args.context]
        else:
            cfg["context"] = args.context
    cfg["out"] = args.out
    cfg["force"] = bool(args.force)
    return cfg


def require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CliError(f"missing config value(s): {', '.join(missing)}")


def write_run_record(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "version": f"depvox {__version__}", "seeds": {"root": cfg["seed"]},
              "config": cfg}
    (out / f"run-{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pick(cls, options: dict, what: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(options) - names)
    if unknown:
        raise CliError(f"unknown {what} option(s): {', '.join(unknown)}")
    return options


def _corpus(cfg: dict):
    require(cfg, "corpus")
    path = Path(cfg["corpus"])
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    return load_manifest(path)


def _kinds(cfg: dict) -> list[str]:
    for key in ("features", "features_b"):
        if cfg.get(key) is not None and cfg[key] not in FEATURE_CHOICES:
            raise CliError(f"unknown feature kind {cfg[key]!r}; choose from {FEATURE_CHOICES}")
    if cfg["arch"].startswith("ce_"):
        return ["spk_emb", CACHE_KINDS[cfg["features_b"]]]
    return [CACHE_KINDS[cfg["features"]]]


def _tables(cfg: dict, manifest, kinds: list[str]):
    """Per-split tables; a pair of tables for two-branch models."""
    require(cfg, "cache")
    cache = FeatureCache(cfg["cache"])
    per_kind = [split_tables(cache.load_table(k, manifest), manifest) for k in kinds]
    if len(per_kind) == 1:
        return per_kind[0]
    return {s: (per_kind[0][s], per_kind[1][s]) for s in ("train", "valid", "test")}


def _arch_spec(cfg: dict, kinds: list[str], context: int) -> ArchSpec:
    opts = _pick(ArchSpec, dict(cfg.get("arch_options") or {}), "arch")
    dim_b = KIND_DIMS[kinds[1]] if len(kinds) > 1 else None
    return ArchSpec(cfg["arch"], KIND_DIMS[kinds[0]], context, input_dim_b=dim_b, **opts)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    opts = _pick(TrainConfig, dict(cfg.get("train") or {}), "train")
    opts.pop("seed", None)
    return TrainConfig(seed=seed, **opts)


# --------------------------------------------------------------------------
# commands

def cmd_synth(cfg: dict, out: Path) -> None:
    opts = {k: v for k, v in cfg.items() if k not in ("seed", "out", "force")}
    opts = _pick(SynthSpec, opts, "synth")
    if "split_fractions" in opts:
        opts["split_fractions"] = tuple(opts["split_fractions"])
    spec = SynthSpec(**opts)
    spec.validate()
    write_run_record(out, "synth", {**cfg, **asdict(spec)})
    m = generate_synthetic_corpus(spec, cfg["seed"], out)
    log.info("wrote %d recordings to %s", len(m.records), out)


def cmd_features(cfg: dict, out: Path) -> None:
    if cfg["features"] == "spk_emb":
        raise CliError("speaker embeddings come from a GE2E checkpoint; use the 'embed' command")
    if cfg["features"] not in FEATURE_CHOICES:
        raise CliError(f"unknown feature kind {cfg['features']!r}")
    manifest = _corpus(cfg)
    write_run_record(out, "features", cfg)
    segs = segments_for(manifest, cfg["seg_dur"])
    computed, reused = FeatureCache(out).fill_functionals(manifest, segs, CACHE_KINDS[cfg["features"]],
                                                          force=cfg["force"])
    log.info("%s: %d computed, %d reused", cfg["features"], computed, reused)


def cmd_ge2e_train(cfg: dict, out: Path) -> None:
    from .ge2e import Ge2eConfig, train_ge2e, utterance_mfccs

    manifest = _corpus(cfg)
    presets = {"toy": Ge2eConfig.toy, "paper": Ge2eConfig.paper, "default": Ge2eConfig}
    if cfg["preset"] not in presets:
        raise CliError(f"unknown GE2E preset {cfg['preset']!r}; choose from {sorted(presets)}")
    opts = _pick(Ge2eConfig, dict(cfg["ge2e"]), "ge2e")
    opts["seed"] = cfg["seed"]
    gcfg = presets[cfg["preset"]](**opts)
    write_run_record(out, "ge2e-train", {**cfg, "ge2e_resolved": asdict(gcfg)})
    utts = utterance_mfccs(manifest, segments_for(manifest, cfg["seg_dur"]))
    model = train_ge2e(utts, gcfg, eval_every=int(cfg["eval_every"]))
    model.save(out / "ge2e.ckpt")
    with (out / "history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "heldout_loss", "w", "b"])
        for h in model.history:
            tl = "" if h["train_loss"] is None else f"{h['train_loss']:.8f}"
            w.writerow([h["step"], tl, f"{h['heldout_loss']:.8f}", f"{h['w']:.8f}", f"{h['b']:.8f}"])


def cmd_embed(cfg: dict, out: Path) -> None:
    from .ge2e import Ge2eModel

    require(cfg, "checkpoint")
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    manifest = _corpus(cfg)
    write_run_record(out, "embed", cfg)
    cache = FeatureCache(out)
    stamp = out / "spk_emb" / "checkpoint.sha256"
    digest = file_digest(ckpt)
    segs = segments_for(manifest, cfg["seg_dur"])
    if not cfg["force"] and stamp.exists() and stamp.read_text().strip() == digest and all(
            cache.has("spk_emb", rid, s.index) for rid in segs for s in segs[rid]):
        log.info("embeddings up to date")
        return
    table = embedding_table(manifest, segs, Ge2eModel.load(ckpt))
    cache.store_table(table)
    stamp.write_text(digest + "\n")
    log.info("embedded %d segments", sum(len(v) for v in table.vectors.values()))


def cmd_train(cfg: dict, out: Path) -> None:
    manifest = _corpus(cfg)
    kinds = _kinds(cfg)
    spec = _arch_spec(cfg, kinds, int(cfg["context"]))
    tcfg = _train_config(cfg, cfg["seed"])
    write_run_record(out, "train", cfg)
    tables = _tables(cfg, manifest, kinds)
    tr, _ = windows_for(tables["train"], spec.context)
    va, _ = windows_for(tables["valid"], spec.context)
    if not tr or not va:
        raise CliError(f"no training or validation windows at context {spec.context}")
    trained = train_classifier(tr, va, spec, tcfg)
    trained.save(out / "model.ckpt", meta={"features": kinds})
    write_curves_csv(trained.curves, out / "curves.csv")


def cmd_eval(cfg: dict, out: Path) -> None:
    from .nn.checkpoint import load_checkpoint

    require(cfg, "checkpoint")
    ckpt = Path(cfg["checkpoint"])
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    manifest = _corpus(cfg)
    trained = TrainedClassifier.load(ckpt)
    kinds = load_checkpoint(ckpt)[1]["meta"].get("features")
    if not kinds:
        raise CliError(f"{ckpt}: checkpoint does not record its feature kinds")
    write_run_record(out, "eval", cfg)
    ev = evaluate_recordings(trained, _tables(cfg, manifest, kinds)["test"])
    write_metrics_csv(ev.report, out / "metrics.csv", {"arch": trained.spec.kind, "context": trained.spec.context})
    with (out / "decisions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording_id", "label", "decision"])
        for rid in ev.decisions:
            w.writerow([rid, ev.labels[rid], ev.decisions[rid]])
        for rid, n in ev.excluded:
            w.writerow([rid, manifest.label(manifest.by_id()[rid]), f"excluded ({n} segments)"])


def cmd_sweep(cfg: dict, out: Path) -> None:
    manifest = _corpus(cfg)
    kinds = _kinds(cfg)
    contexts = [int(c) for c in cfg["contexts"]]
    spec = _arch_spec(cfg, kinds, 1 if cfg["arch"] in ("dnn_d", "ce_dd") else contexts[0])
    tcfg = _train_config(cfg, cfg["seed"])
    write_run_record(out, "sweep", cfg)
    tables = _tables(cfg, manifest, kinds)
    res = context_sweep(spec, tables["train"], tables["valid"], tables["test"], contexts,
                        [int(s) for s in cfg["seeds"]], tcfg, feature_kind="+".join(kinds))
    res.write_csv(out / "sweep.csv")


COMMANDS = {"synth": cmd_synth, "features": cmd_features, "ge2e-train": cmd_ge2e_train, "embed": cmd_embed,
            "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depvox", description="Speech depression detection experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH", help="JSON config; flags override its keys")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--arch", choices=ARCH_CHOICES)
        sp.add_argument("--features", choices=FEATURE_CHOICES)
        sp.add_argument("--context", type=int, metavar="N")
        sp.add_argument("--out", metavar="DIR", required=True)
        sp.add_argument("--force", action="store_true", help="recompute cached entries")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg, Path(args.out))
    except (CliError, ValueError, CheckpointError, FileNotFoundError) as e:
        print(f"depvox {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
