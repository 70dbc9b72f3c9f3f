"""Command-line pipeline: synth -> preprocess -> fit -> featurize -> train -> evaluate.

Each command reads a YAML/JSON config (``--config``) whose keys match its
flags; flags given on the command line win. Every artifact directory gets a
``meta.json`` that the next stage reads, and every CSV starts with comment
lines naming the tool version, the config hash and the root seed.

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 partial failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .elastic_net import ElasticNetConfig, fit_many, sweep
from .evaluation import EvalReport, confusion, metrics, repeated_eval, write_accuracy_curve
from .features import FeatureMatrix, TRANSFORMS, featurize
from .gabor import GaborDictionary
from .net import (ARCHITECTURES, OPTIMIZERS, SEQUENCE_MODES, SpecError, TrainConfig, load_checkpoint,
                  make_spec, predict_proba, save_checkpoint, stack_dataset, train, write_history)
from .signal_prep import (ClassLabel, ManifestRow, PreprocessConfig, Recording, load_wav, preprocess,
                          read_manifest, synth_pcg, write_manifest, write_wav)

log = logging.getLogger("gaborlens")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class ConfigError(ValueError):
    """Bad configuration or mismatched upstream artifacts (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# ------------------------------------------------------------ config tables

# key -> (default, type); REQUIRED marks keys without a default, list types are
# written as [elem_type]
REQUIRED = object()
PATH_KEYS = {"out", "manifest", "store", "fits", "features", "checkpoint"}
NOT_HASHED = PATH_KEYS | {"workers"}

_EN_KEYS = {f.name: (f.default, type(f.default)) for f in dataclasses.fields(ElasticNetConfig) if f.name != "alpha"}
_TRAIN_KEYS = {
    "learning_rate": (None, float),
    "momentum": (0.5, float),
    "beta1": (0.9, float),
    "beta2": (0.999, float),
    "epsilon": (1e-8, float),
    "batch_size": (150, int),
    "max_epochs": (100, int),
    "record_time": (False, bool),
}
COMMON = {"seed": (0, int), "workers": (1, int), "out": (REQUIRED, str)}

COMMANDS = {
    "synth": {"n_per_class": (10, int), "N": (14, int), "sample_rate": (8000.0, float)},
    "preprocess": {"manifest": (REQUIRED, str), "raw_len": (2 ** 14, int), "downsample_factor": (8, int),
                   "raw_rate": (8000.0, float), "anti_alias": (True, bool)},
    "fit": {"store": (REQUIRED, str), "j": (1, int), "alpha": (0.1, float), **_EN_KEYS},
    "featurize": {"fits": (REQUIRED, str), "transform": ("log", str)},
    "sweep": {"store": (REQUIRED, str), "j_values": ([1, 3, 8], [int]), "alpha_values": ([0.0, 0.1, 0.5, 1.0], [float]),
              **_EN_KEYS},
    "train": {"features": (REQUIRED, str), "architecture": ("OneD_TwoD_LSTM", str), "sequence": ("width", str),
              "optimizer": ("ADAM", str), **_TRAIN_KEYS},
    "evaluate": {"features": (REQUIRED, [str]), "architectures": (["OneD_TwoD_LSTM"], [str]),
                 "optimizers": (["ADAM"], [str]), "sequence": ("width", str), "n_runs": (100, int),
                 "train_fraction": (0.675, float), "stratified": (True, bool), "checkpoint": (None, str),
                 **_TRAIN_KEYS},
}

HELP = {
    "synth": "generate synthetic PCG-like recordings (WAV + manifest)",
    "preprocess": "clip/pad, downsample and standardize recordings into a signal store",
    "fit": "elastic-net Gabor coefficients for every stored signal",
    "featurize": "weighted-log feature matrices from fitted coefficients",
    "sweep": "residual/coefficient diagnostics over a (j, alpha) grid",
    "train": "train a CNN-LSTM on a feature set",
    "evaluate": "repeated train/test evaluation, or score a checkpoint",
}


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def _coerce(key, value, typ):
    """Check a config-file value against its declared type."""
    if value is None:
        return None
    if isinstance(typ, list):
        if not isinstance(value, list):
            value = [value]
        return [_coerce(key, v, typ[0]) for v in value]
    if typ is bool:
        return _parse_bool(value)
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return str(value)


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaborlens", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gaborlens {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, table in COMMANDS.items():
        sp = sub.add_parser(cmd, help=HELP[cmd], description=HELP[cmd])
        sp.add_argument("--config", help="YAML or JSON file with keys named like the flags")
        for key, (default, typ) in {**COMMON, **table}.items():
            shown = "required" if default is REQUIRED else f"default {default!r}"
            if isinstance(typ, list):
                sp.add_argument(_flag(key), dest=key, nargs="+", type=typ[0], default=None, help=shown)
            elif typ is bool:
                sp.add_argument(_flag(key), dest=key, type=_parse_bool, default=None, metavar="BOOL", help=shown)
            else:
                sp.add_argument(_flag(key), dest=key, type=typ, default=None, help=shown)
    return p


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags; unknown or missing keys are errors."""
    table = {**COMMON, **COMMANDS[command]}
    values = {k: d for k, (d, _) in table.items()}
    if args.config:
        doc = load_config_file(args.config)
        unknown = sorted(set(doc) - set(table))
        if unknown:
            raise ConfigError(f"unknown config key(s) for '{command}': {', '.join(unknown)}")
        for k, v in doc.items():
            values[k] = _coerce(k, v, table[k][1])
    for k in table:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    missing = [k for k, v in values.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(_flag(k) for k in missing)}")
    if values["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    values["command"] = command
    return values


def config_hash(cfg: dict) -> str:
    """Hash of the computational settings; paths and worker count are left out."""
    doc = {k: v for k, v in cfg.items() if k not in NOT_HASHED}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def header_lines(cfg: dict) -> list[str]:
    return [f"gaborlens {__version__}", f"command={cfg['command']}",
            f"config_sha256={config_hash(cfg)}", f"seed={cfg['seed']}"]


def derive_seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _write_meta(out: Path, cfg: dict, **extra) -> None:
    doc = {"tool": f"gaborlens {__version__}", "command": cfg["command"], "config_sha256": config_hash(cfg),
           "seed": cfg["seed"], "params": {k: v for k, v in cfg.items() if k not in NOT_HASHED}, **extra}
    (out / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_meta(d: Path, command: str) -> dict:
    p = d / "meta.json"
    if not p.is_file():
        raise ConfigError(f"{d}: no meta.json; expected the output directory of '{command}'")
    meta = json.loads(p.read_text())
    if meta.get("command") != command:
        raise ConfigError(f"{d}: produced by '{meta.get('command')}', expected '{command}'")
    return meta


def _en_config(cfg: dict, alpha: float = 1.0) -> ElasticNetConfig:
    try:
        return ElasticNetConfig(alpha=alpha, **{k: cfg[k] for k in _EN_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg: dict, optimizer: str, seed: int) -> TrainConfig:
    try:
        return TrainConfig(optimizer=optimizer, seed=seed, **{k: cfg[k] for k in _TRAIN_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    n, N = cfg["n_per_class"], cfg["N"]
    if n < 0:
        raise ConfigError("n_per_class must be >= 0")
    if N < 5:
        raise ConfigError("N must be >= 5")
    out = Path(cfg["out"])
    (out / "wav").mkdir(parents=True, exist_ok=True)
    if n == 0:
        log.warning("n_per_class=0: writing an empty manifest")
    rows = []
    for label in ClassLabel:
        for i in range(n):
            rec = synth_pcg(label, N, derive_seed(cfg["seed"], i), cfg["sample_rate"])
            rid = f"{label.name}-{i:04d}"
            rel = f"wav/{rid}.wav"
            write_wav(out / rel, rec)
            rows.append(ManifestRow(rid, rel, label, len(rec), float(round(cfg["sample_rate"]))))
    write_manifest(out / "manifest.csv", rows, header_lines(cfg))
    _write_meta(out, cfg, n_recordings=len(rows))
    log.info("wrote %d recordings to %s", len(rows), out)
    return EXIT_OK


def cmd_preprocess(cfg: dict) -> int:
    manifest = Path(cfg["manifest"])
    if not manifest.is_file():
        raise ConfigError(f"manifest {manifest} does not exist")
    try:
        pcfg = PreprocessConfig(cfg["raw_len"], cfg["downsample_factor"], cfg["raw_rate"], cfg["anti_alias"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = read_manifest(manifest)
    base = manifest.parent
    kept, signals, failed = [], [], 0
    for row in rows:
        path = base / row.path
        try:
            rec = load_wav(path, row.label, row.id)
            if abs(rec.sample_rate - pcfg.raw_rate) > 1e-9:
                raise ValueError(f"{path}: sample rate {rec.sample_rate} != raw_rate {pcfg.raw_rate}")
            r = preprocess(rec, pcfg)
        except (OSError, ValueError) as exc:
            log.error("preprocess failed for %s: %s", row.id, exc)
            failed += 1
            continue
        kept.append(ManifestRow(row.id, row.path, row.label, len(r), r.sample_rate))
        signals.append(r.samples)
    if rows and not kept:
        log.error("every recording failed; no store written")
        return EXIT_RUNTIME
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    L = pcfg.raw_len // pcfg.downsample_factor
    np.save(out / "signals.npy", np.array(signals, dtype=np.float64).reshape(len(signals), L))
    write_manifest(out / "manifest.csv", kept, header_lines(cfg))
    _write_meta(out, cfg, N=pcfg.length_exponent, sample_rate=pcfg.raw_rate / pcfg.downsample_factor,
                n_recordings=len(kept), n_failed=failed)
    if failed:
        log.warning("%d of %d recordings failed", failed, len(rows))
        return EXIT_PARTIAL
    return EXIT_OK


def _load_store(d: Path):
    meta = _read_meta(d, "preprocess")
    rows = read_manifest(d / "manifest.csv")
    X = np.load(d / "signals.npy")
    if X.shape[0] != len(rows):
        raise ConfigError(f"{d}: signals.npy has {X.shape[0]} rows but manifest has {len(rows)}")
    if not rows:
        raise ConfigError(f"{d}: signal store is empty")
    return meta, rows, X


def _check_j(j: int, N: int) -> None:
    if not 1 <= j <= N - 1:
        raise ConfigError(f"j={j} is outside 1..{N - 1} for signals of length 2**{N}")


FIT_COLUMNS = ("id", "label", "lambda_selected", "n_nonzero", "residual_energy", "coeff_energy",
               "iterations", "converged")


def cmd_fit(cfg: dict) -> int:
    meta, rows, X = _load_store(Path(cfg["store"]))
    N, j, alpha = meta["N"], cfg["j"], cfg["alpha"]
    _check_j(j, N)
    en = _en_config(cfg, alpha)
    results = fit_many(GaborDictionary(j, N), X.T, alpha, en)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "coeffs.npy", np.array([r.coeffs for r in results], dtype=np.float64))
    with open(out / "fits.csv", "w", newline="") as fh:
        for line in header_lines(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIT_COLUMNS)
        for row, r in zip(rows, results):
            w.writerow([row.id, "" if row.label is None else row.label.name, repr(float(r.lambda_selected)),
                        r.n_nonzero, repr(float(r.residual_energy)), repr(float(r.coeff_energy)),
                        r.iterations, int(r.converged)])
    n_bad = sum(not r.converged for r in results)
    if n_bad:
        log.warning("%d of %d fits hit max_iter before converging", n_bad, len(results))
    _write_meta(out, cfg, N=N, j=j, alpha=alpha, n_fits=len(results), n_unconverged=n_bad)
    return EXIT_OK


def _read_rows(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def cmd_featurize(cfg: dict) -> int:
    d = Path(cfg["fits"])
    meta = _read_meta(d, "fit")
    if cfg["transform"] not in TRANSFORMS:
        raise ConfigError(f"transform must be one of {TRANSFORMS}")
    rows = _read_rows(d / "fits.csv")
    A = np.load(d / "coeffs.npy")
    if A.shape[0] != len(rows):
        raise ConfigError(f"{d}: coeffs.npy has {A.shape[0]} rows but fits.csv has {len(rows)}")
    j, N = meta["j"], meta["N"]
    out = Path(cfg["out"])
    (out / "features").mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        for line in header_lines(cfg):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "file"))
        for k, (row, a) in enumerate(zip(rows, A)):
            rel = f"features/{k:05d}_{row['id']}.bin"
            featurize(a, j, N, cfg["transform"]).save(out / rel)
            w.writerow((row["id"], row["label"], rel))
    _write_meta(out, cfg, N=N, j=j, alpha=meta["alpha"], transform=cfg["transform"], n_features=len(rows))
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    meta, rows, X = _load_store(Path(cfg["store"]))
    N = meta["N"]
    for j in cfg["j_values"]:
        _check_j(j, N)
    for a in cfg["alpha_values"]:
        if not 0 <= a <= 1:
            raise ConfigError(f"alpha={a} outside [0, 1]")
    recs = [Recording(x, meta["sample_rate"], r.label, r.id) for r, x in zip(rows, X)]
    table = sweep(recs, cfg["j_values"], cfg["alpha_values"], _en_config(cfg), workers=cfg["workers"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    hdr = header_lines(cfg)
    table.to_csv(out / "sweep.csv", hdr)
    cols = [f.name for f in dataclasses.fields(table.fits[0])]
    with open(out / "sweep_fits.csv", "w", newline="") as fh:
        for line in hdr:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for f in table.fits:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v)
                        for v in (getattr(f, c) for c in cols)])
    _write_meta(out, cfg, N=N, n_fits=len(table.fits))
    return EXIT_OK


def _load_features(d: Path):
    meta = _read_meta(d, "featurize")
    data = []
    for row in _read_rows(d / "index.csv"):
        if not row["label"]:
            raise ConfigError(f"{d}: feature {row['id']} has no class label")
        m = FeatureMatrix.load(d / row["file"])
        if (m.j, m.N) != (meta["j"], meta["N"]):
            raise ConfigError(f"{d / row['file']}: (j={m.j}, N={m.N}) differs from meta (j={meta['j']}, N={meta['N']})")
        data.append((m, int(ClassLabel.parse(row["label"]))))
    if not data:
        raise ConfigError(f"{d}: no feature matrices")
    return meta, data


def _make_spec(arch, sequence, j, N):
    if arch not in ARCHITECTURES:
        raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {arch!r}")
    if sequence not in SEQUENCE_MODES:
        raise ConfigError(f"sequence must be one of {SEQUENCE_MODES}")
    try:
        return make_spec(arch, j, N, sequence)
    except SpecError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    meta, data = _load_features(Path(cfg["features"]))
    if cfg["optimizer"] not in OPTIMIZERS:
        raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
    spec = _make_spec(cfg["architecture"], cfg["sequence"], meta["j"], meta["N"])
    tcfg = _train_config(cfg, cfg["optimizer"], cfg["seed"])
    weights, history, state = train(data, spec, tcfg,
                                    callback=lambda r: log.info("epoch %d loss %.6f acc %.4f",
                                                                r.epoch, r.loss, r.train_accuracy))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", spec, weights, state)
    write_history(out / "history.csv", history, header_lines(cfg))
    _write_meta(out, cfg, N=meta["N"], j=meta["j"], alpha=meta["alpha"], final_loss=history[-1].loss,
                final_train_accuracy=history[-1].train_accuracy)
    return EXIT_OK


def _write_report(d: Path, rep: EvalReport, hdr) -> None:
    d.mkdir(parents=True, exist_ok=True)
    rep.to_json(d / "report.json")
    rep.per_class_csv(d / "per_class.csv", hdr)
    rep.per_run_csv(d / "per_run.csv", hdr)


def cmd_evaluate(cfg: dict) -> int:
    out = Path(cfg["out"])
    hdr = header_lines(cfg)
    if cfg["checkpoint"]:
        if len(cfg["features"]) != 1:
            raise ConfigError("scoring a checkpoint takes exactly one features directory")
        _, data = _load_features(Path(cfg["features"][0]))
        spec, weights, _ = load_checkpoint(cfg["checkpoint"])
        try:
            X, y = stack_dataset(spec, data)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        pred = np.argmax(predict_proba(spec, weights, X), axis=1)
        rep = EvalReport([metrics(confusion(zip(y, pred)))], seed=cfg["seed"])
        _write_report(out, rep, hdr)
        return EXIT_OK

    for opt in cfg["optimizers"]:
        if opt not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {opt!r}")
    if cfg["n_runs"] < 1 or not 0 < cfg["train_fraction"] < 1:
        raise ConfigError("n_runs >= 1 and 0 < train_fraction < 1 required")
    sets = [(_load_features(Path(p))) for p in cfg["features"]]
    cells = []
    for meta, data in sets:
        for arch in cfg["architectures"]:
            spec = _make_spec(arch, cfg["sequence"], meta["j"], meta["N"])
            for opt in cfg["optimizers"]:
                tcfg = _train_config(cfg, opt, cfg["seed"])
                try:
                    rep = repeated_eval(data, spec, tcfg, cfg["n_runs"], cfg["train_fraction"], cfg["seed"],
                                        stratified=cfg["stratified"], workers=cfg["workers"])
                except ValueError as exc:
                    raise ConfigError(str(exc)) from exc
                log.info("%s/%s j=%d alpha=%g: accuracy %.2f +- %.2f", arch, opt, meta["j"], meta["alpha"],
                         rep.mean("accuracy"), rep.std("accuracy"))
                _write_report(out / f"{arch}_{opt}_j{meta['j']}_alpha{meta['alpha']:g}", rep, hdr)
                cells.append((meta["j"], meta["alpha"], arch, opt, rep))
    write_accuracy_curve(out / "accuracy_curve.csv", cells, hdr)
    _write_meta(out, cfg, n_cells=len(cells))
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "fit": cmd_fit, "featurize": cmd_featurize,
            "sweep": cmd_sweep, "train": cmd_train, "evaluate": cmd_evaluate}


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _):
        pass


def _setup_logging() -> None:
    name = os.environ.get("GABORLENS_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name)
    pkg = logging.getLogger("gaborlens")
    pkg.setLevel(level or logging.WARNING)
    if not any(isinstance(h, _StderrHandler) for h in pkg.handlers):
        h = _StderrHandler()
        h.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        pkg.addHandler(h)
    if level is None:
        log.warning("GABORLENS_LOG=%r not in %s; using warn", name, sorted(LOG_LEVELS))


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level report
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
