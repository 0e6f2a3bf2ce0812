"""Command-line entry point: ``optfs <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_arrays, save_arrays
from .data import (DatasetSchema, EncodedDataset, FeatureVocabulary, PreparedData, SyntheticSpec,
                   build_vocabulary, encode_rows, generate_synthetic, parse_rows,
                   split_assignments, write_tsv)
from .errors import ConfigError, DataError, OptFSError
from .gating import BinaryGate, GateState
from .metrics import field_kept_ratio, field_mutual_information, write_mi_report
from .models import CTRModel, ModelConfig
from .trainer import (RETRAIN_INITS, TrainConfig, TrainSnapshot, evaluate_model, history_csv,
                      retrain, search)

log = logging.getLogger("optfs")

SPLITS = ("train", "valid", "test")
DEFAULT_CONFIG = {
    "model": {"name": "deepfm", "embed_dim": 16, "mlp_dims": [64, 32, 16], "cross_depth": 3},
    "search": {"learning_rate": 1e-3, "l2_reg": 0.0, "lambda": 1e-6, "epochs": 10,
               "rewind_epoch": 1, "gamma": 1e3, "batch_size": 4096, "seed": 0,
               "gate_init": 0.01, "fractional_epoch": False},
    "retrain": {"init": "co", "patience": 1, "retrain_epochs": 10, "reset_optimizer": False},
    "data": {"split_seed": 0},
}

# CLI flag -> (section, key)
FLAG_KEYS = {
    "seed": ("search", "seed"),
    "model": ("model", "name"),
    "gamma": ("search", "gamma"),
    "lam": ("search", "lambda"),
    "epochs": ("search", "epochs"),
    "rewind_epoch": ("search", "rewind_epoch"),
    "retrain_init": ("retrain", "init"),
    "batch_size": ("search", "batch_size"),
    "embed_dim": ("model", "embed_dim"),
    "mlp_dims": ("model", "mlp_dims"),
}


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        out[section].update(values)
    return out


def resolve_config(args, base: dict | None = None) -> dict:
    cfg = copy.deepcopy(base or DEFAULT_CONFIG)
    if getattr(args, "config", None):
        cfg = _merge(cfg, _read_json(args.config))
    for attr, (section, key) in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    merged = {("lam" if k == "lambda" else k): v for k, v in cfg["search"].items()}
    merged.update({k: v for k, v in cfg["retrain"].items() if k != "init"})
    return TrainConfig.from_dict(merged).validate()


def model_config(cfg: dict, vocab: FeatureVocabulary) -> ModelConfig:
    mc = dict(cfg["model"])
    try:
        return ModelConfig(mc.pop("name"), vocab.m, vocab.n, vocab_hash=vocab.hash, **mc)
    except TypeError as exc:
        raise ConfigError(f"model config: {exc}") from None


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: dict[str, str],
                   outputs: list[str], filename: str = "manifest.json") -> str:
    """Write manifest.json; the id covers everything except timestamps."""
    body = {"command": command, "config": cfg, "inputs": inputs, "version": __version__,
            "outputs": outputs}
    manifest_id = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    doc = dict(body, id=manifest_id, started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    (out_dir / filename).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest_id


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data directory
# --------------------------------------------------------------------------

def load_data_dir(data_dir) -> PreparedData:
    d = Path(data_dir)
    if not (d / "vocab.json").exists():
        raise DataError(f"{d}: no vocab.json; run `optfs preprocess` first")
    vocab = FeatureVocabulary.load(d)
    splits = [EncodedDataset.load(d / f"{s}.bin", expected_hash=vocab.hash) for s in SPLITS]
    return PreparedData(vocab, *splits)


def save_model(path: Path, model: CTRModel, mask: BinaryGate | None, extra: dict | None = None) -> None:
    arrays = model.state_dict()
    if mask is not None:
        arrays["gate/bits"] = mask.bits.astype(np.float64)
    meta = {"kind": "model", "model_config": model.config.to_json()}
    meta.update(extra or {})
    save_arrays(path, arrays, model.config.vocab_hash, meta)
    sidecar = {"interaction": model.config.to_json()["interaction"], "model": model.config.to_json()}
    sidecar.update(extra or {})
    _write_json(path.with_suffix(".json"), sidecar)


def load_model(path, expected_vocab_hash: str | None = None) -> tuple[CTRModel, BinaryGate | None]:
    arrays, header = load_arrays(path, expected_vocab_hash)
    mc = ModelConfig.from_json(header["metadata"]["model_config"])
    model = CTRModel(mc)
    model.load_state_dict(arrays)
    mask = None
    if "gate/bits" in arrays:
        mask = BinaryGate(arrays["gate/bits"].astype(np.uint8), header["vocab_hash"])
    return model, mask


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    if not args.schema:
        raise ConfigError("preprocess needs --schema")
    schema = DatasetSchema.load(args.schema)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(args.raw) == 1:
        rows = _read_rows(args.raw[0], schema)
        assign = split_assignments(len(rows), args.seed or 0)
        parts = [[r for r, a in zip(rows, assign) if a == k] for k in range(3)]
    elif len(args.raw) == 3:
        parts = [_read_rows(p, schema) for p in args.raw]
    else:
        raise ConfigError("preprocess takes one raw TSV (split 8:1:1) or three (train valid test)")
    if not parts[0]:
        raise DataError("training split is empty")
    vocab = build_vocabulary(parts[0], schema.min_count, schema.fields)
    vocab.save(out)
    schema.save(out / "schema.json")
    for name, rows in zip(SPLITS, parts):
        encode_rows(rows, vocab).save(out / f"{name}.bin")
    print(f"m={vocab.m} n={vocab.n}")
    for name, card in zip(vocab.field_names, vocab.cardinalities()):
        print(f"{name}\t{card}")
    return 0


def _read_rows(path, schema: DatasetSchema):
    try:
        with open(path) as fh:
            return list(parse_rows(fh, schema))
    except FileNotFoundError:
        raise DataError(f"raw file not found: {path}") from None


def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec.from_json(_read_json(args.spec)) if args.spec else SyntheticSpec()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    syn = generate_synthetic(spec, args.seed or 0)
    for name in SPLITS:
        write_tsv(out / f"{name}.tsv", getattr(syn, name))
    DatasetSchema(syn.field_names(), ["categorical"] * spec.n_fields, min_count=1).save(out / "schema.json")
    _write_json(out / "spec.json", dict(spec.to_json(), seed=args.seed or 0))
    _write_json(out / "informative.json", [
        {"field": f, "token": tok, "main_effect": syn.main_effects[(f, tok)]}
        for f, tok in syn.informative
    ])
    print(f"wrote {len(syn.train)}/{len(syn.valid)}/{len(syn.test)} rows to {out}")
    return 0


def run_search(cfg: dict, data_dir, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data_dir(data_dir)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg, data.vocab)
    _write_json(out / "config.json", cfg)
    inputs = {s: _file_hash(Path(data_dir) / f"{s}.bin") for s in SPLITS}
    inputs["vocab"] = data.vocab.hash
    manifest_id = write_manifest(out, "search", cfg, inputs,
                                 ["config.json", "snapshot.bin", "search_final.bin", "mask.json",
                                  "history.csv", "vocab_hash"])
    (out / "vocab_hash").write_text(data.vocab.hash + "\n")

    model = CTRModel(mcfg, tcfg.seed)
    gates = GateState.create(mcfg.m, tcfg.gamma, tcfg.epochs, tcfg.lam, tcfg.gate_init)
    res = search(data.train, data.valid, model, gates, tcfg)

    res.snapshot.save(out / "snapshot.bin")
    save_arrays(out / "search_final.bin", res.final_state, data.vocab.hash,
                {"kind": "search_final", "manifest_id": manifest_id})
    mask_doc = res.mask.to_json()
    mask_doc["manifest_id"] = manifest_id
    _write_json(out / "mask.json", mask_doc)
    (out / "history.csv").write_text(history_csv(res.history))
    print(f"ratio={res.mask.ratio:.4f} kept={int(res.mask.bits.sum())}/{res.mask.m}")
    return {"ratio": res.mask.ratio, "valid_auc": res.history[-1].valid_auc}


def cmd_search(args) -> int:
    run_search(resolve_config(args), args.data_dir, args.out_dir)
    return 0


def run_retrain(cfg: dict, data_dir, run_dir, mask_path=None) -> dict:
    run = Path(run_dir)
    data = load_data_dir(data_dir)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg, data.vocab)
    init = cfg["retrain"]["init"]
    if init not in RETRAIN_INITS:
        raise ConfigError(f"--retrain-init must be one of {RETRAIN_INITS}")
    mask = BinaryGate.load(mask_path or run / "mask.json")
    if mask.vocab_hash and mask.vocab_hash != data.vocab.hash:
        raise DataError("mask vocabulary hash does not match the data directory; refusing to retrain")
    snapshot = TrainSnapshot.load(run / "snapshot.bin", data.vocab.hash) if init == "co" else None
    final_state = load_arrays(run / "search_final.bin", data.vocab.hash)[0] if init == "wo" else None
    inputs = {"mask": _file_hash(mask_path or run / "mask.json"), "vocab": data.vocab.hash}
    for name in ("snapshot.bin", "search_final.bin"):
        if (run / name).exists():
            inputs[name] = _file_hash(run / name)
    manifest_id = write_manifest(run, "retrain", cfg, inputs, ["final_model.bin", "metrics.json"],
                                 "retrain_manifest.json")
    result = retrain(data.train, data.valid, mask, snapshot, tcfg, mcfg, init, data.test, final_state)
    extra = {"retrain_init": init, "best_epoch": result.best_epoch, "manifest_id": manifest_id,
             "mask_source": str(mask_path) if mask_path else "mask.json"}
    save_model(run / "final_model.bin", result.model, mask,
               {"retrain_init": init, "manifest_id": manifest_id})
    result.test.save(run / "metrics.json", split="test", valid_auc=result.valid.auc, **extra)
    print(f"test auc={result.test.auc:.5f} logloss={result.test.logloss:.5f} ratio={result.test.ratio:.4f}")
    return {"test_auc": result.test.auc, "test_logloss": result.test.logloss, "ratio": result.test.ratio}


def cmd_retrain(args) -> int:
    run = Path(args.out_dir)
    base = _read_json(run / "config.json") if (run / "config.json").exists() else None
    cfg = resolve_config(args, base)
    run.mkdir(parents=True, exist_ok=True)
    run_retrain(cfg, args.data_dir, run, args.mask)
    return 0


def cmd_eval(args) -> int:
    data = load_data_dir(args.data_dir)
    model, mask = load_model(args.model, data.vocab.hash)
    split = getattr(data, args.split)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_id = write_manifest(out, "eval", {"split": args.split},
                                 {"model": _file_hash(args.model), "vocab": data.vocab.hash},
                                 ["metrics.json"])
    gate = mask.as_tensor() if mask is not None else None
    report = evaluate_model(model, split, gate, mask.ratio if mask is not None else 1.0)
    report.save(out / "metrics.json", split=args.split, manifest_id=manifest_id)
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0


def cmd_report_mi(args) -> int:
    data = load_data_dir(args.data_dir)
    mi = field_mutual_information(data.train.indices, data.train.labels)
    kept = None
    if args.mask:
        mask = BinaryGate.load(args.mask)
        if mask.m != data.vocab.m:
            raise DataError("mask length does not match the vocabulary")
        kept = field_kept_ratio(mask, data.vocab.field_of, data.vocab.n)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mi_report(out / "mi.csv", mi, kept)
    for i, v in enumerate(mi):
        print(f"{data.vocab.field_names[i]}\t{v:.6f}" + ("" if kept is None else f"\t{kept[i]:.4f}"))
    return 0


def _grid_job(job):
    cfg, data_dir, run_dir = job
    logging.getLogger("optfs").setLevel(logging.WARNING)
    summary = run_search(cfg, data_dir, run_dir)
    summary.update(run_retrain(cfg, data_dir, run_dir))
    return summary


def _flag_attr(flag: str) -> str:
    """Grid keys are flag names ("lambda", "rewind-epoch"); map them to FLAG_KEYS."""
    attr = flag.lstrip("-").replace("-", "_")
    return "lam" if attr == "lambda" else attr


def cmd_grid(args) -> int:
    if not args.grid:
        raise ConfigError("grid needs --grid FILE")
    base = resolve_config(args)
    grid = _read_json(args.grid)
    keys = sorted(grid)
    for k in keys:
        if _flag_attr(k) not in FLAG_KEYS:
            raise ConfigError(f"grid key {k!r} is not an overridable flag")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs, labels = [], []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        cfg = copy.deepcopy(base)
        for k, v in zip(keys, combo):
            section, key = FLAG_KEYS[_flag_attr(k)]
            cfg[section][key] = v
        labels.append(dict(zip(keys, combo)))
        jobs.append((cfg, args.data_dir, out / f"run_{i:03d}"))
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_grid_job, jobs))
    else:
        results = [_grid_job(j) for j in jobs]
    with open(out / "grid_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["run"] + keys + ["ratio", "valid_auc", "test_auc", "test_logloss"]
        w.writerow(cols)
        for i, (lab, res) in enumerate(zip(labels, results)):
            w.writerow([f"run_{i:03d}"] + [json.dumps(lab[k]) for k in keys]
                       + [repr(res["ratio"]), repr(res["valid_auc"]), repr(res["test_auc"]),
                          repr(res["test_logloss"])])
    print(f"{len(jobs)} runs written to {out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _mlp_dims(text: str) -> list[int]:
    try:
        dims = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--mlp-dims expects comma-separated ints, got {text!r}")
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError("--mlp-dims needs at least one positive width")
    return dims


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config with model/search/retrain/data sections")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=["fm", "deepfm", "dcn", "ipnn"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--rewind-epoch", type=int)
    p.add_argument("--retrain-init", choices=list(RETRAIN_INITS))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--mlp-dims", type=_mlp_dims)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="optfs", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--version", action="version", version=f"optfs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build vocabulary and encoded splits from raw TSV")
    p.add_argument("raw", nargs="+", help="one TSV (hash-split 8:1:1) or three: train valid test")
    p.add_argument("--schema", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="split seed")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset with a planted informative set")
    p.add_argument("--spec", help="JSON synthetic spec (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("search", help="searching stage: mask.json, snapshot.bin, history.csv")
    _add_train_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrain", help="retraining stage from a search run directory")
    _add_train_flags(p)
    p.add_argument("--mask", help="external mask.json (e.g. searched on another backbone)")
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate a saved model on one split")
    p.add_argument("--model", required=True, help="final_model.bin")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=list(SPLITS), default="test")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report-mi", help="per-field mutual information with the label")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--mask", help="mask.json to add per-field kept ratios")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report_mi)

    p = sub.add_parser("grid", help="search+retrain over a grid of flag values")
    _add_train_flags(p)
    p.add_argument("--grid", help='JSON object, e.g. {"lambda": [1e-5, 1e-6], "model": ["fm"]}')
    p.add_argument("--parallel", type=int, default=1)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else ConfigError.exit_code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OptFSError as exc:
        print(f"optfs {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
