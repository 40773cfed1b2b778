"""Command line front end.

Subcommands:
  pretrain   centralized warm-start training on the pooled corpus
  federated  run a federated experiment from a JSON config
  report     summarize and merge metrics CSV files

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Config
files are strict JSON; unknown keys are rejected by name at every level so
typos never silently fall back to defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import data as datamod
from . import model
from .compress import QuantConfig, cost_gb, ideal_bits_per_value
from .fedcore import CSV_HEADER, FederatedConfig, centralized_pretrain, run_experiment
from .params import load_checkpoint, save_checkpoint
from .prng import Prng

__all__ = ["ConfigError", "main"]


class ConfigError(Exception):
    """Invalid configuration (bad JSON, unknown/missing keys, bad values)."""


_MISSING = object()

_KIND_CHECKS = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "num": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
    "dict": lambda v: isinstance(v, dict),
}

_KIND_NAMES = {
    "int": "an integer",
    "num": "a number",
    "bool": "a boolean",
    "str": "a string",
    "dict": "an object",
}


def _require_mapping(obj, context: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    return obj


def _check_keys(obj: dict, allowed, context: str):
    for key in sorted(obj):
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {context}")


def _take(obj: dict, key: str, kind: str, context: str, default=_MISSING):
    if key not in obj:
        if default is _MISSING:
            raise ConfigError(f"missing required key {key!r} in {context}")
        return default
    value = obj[key]
    if value is None and default is None:
        return None
    if not _KIND_CHECKS[kind](value):
        raise ConfigError(f"key {key!r} in {context} must be {_KIND_NAMES[kind]}")
    return float(value) if kind == "num" else value


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return _require_mapping(obj, "config")


# ---- section parsers -----------------------------------------------------------


_MODEL_KEYS = {"preset", "arch", "vocab_size", "embed_dim", "layer_size", "num_layers", "num_heads", "max_seq_len"}
_MODEL_KINDS = {"arch": "str", "preset": "str"}


def parse_model(obj) -> model.ModelConfig:
    obj = _require_mapping(obj, "model")
    _check_keys(obj, _MODEL_KEYS, "model")
    try:
        if "preset" in obj:
            name = _take(obj, "preset", "str", "model")
            overrides = {
                key: _take(obj, key, _MODEL_KINDS.get(key, "int"), "model") for key in obj if key != "preset"
            }
            return model.preset_config(name, **overrides)
        cfg = model.ModelConfig(
            arch=_take(obj, "arch", "str", "model"),
            vocab_size=_take(obj, "vocab_size", "int", "model"),
            embed_dim=_take(obj, "embed_dim", "int", "model"),
            layer_size=_take(obj, "layer_size", "int", "model"),
            num_layers=_take(obj, "num_layers", "int", "model"),
            num_heads=_take(obj, "num_heads", "int", "model", 8),
            max_seq_len=_take(obj, "max_seq_len", "int", "model", 30),
        )
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


_QUANT_KEYS = {"scheme", "bits", "zero_center", "linf_clip", "clip_std"}


def parse_quant(obj, context: str) -> QuantConfig:
    obj = _require_mapping(obj, context)
    _check_keys(obj, _QUANT_KEYS, context)
    base = QuantConfig()
    return QuantConfig(
        scheme=_take(obj, "scheme", "str", context, base.scheme),
        bits=_take(obj, "bits", "num", context, base.bits),
        zero_center=_take(obj, "zero_center", "bool", context, base.zero_center),
        linf_clip=_take(obj, "linf_clip", "bool", context, base.linf_clip),
        clip_std=_take(obj, "clip_std", "num", context, base.clip_std),
    )


_FED_KEYS = {
    "model",
    "data",
    "rounds",
    "clients_per_round",
    "client_lr",
    "batch_size",
    "max_examples",
    "local_epochs",
    "clipnorm",
    "server_optimizer",
    "server_lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "algorithm",
    "fedprox_mu",
    "mime_lr",
    "mime_eps",
    "pvt_fraction",
    "download",
    "upload",
    "eval_period",
    "warm_start",
}

_FED_INTS = ("rounds", "clients_per_round", "batch_size", "max_examples", "local_epochs", "eval_period")
_FED_NUMS = (
    "client_lr",
    "clipnorm",
    "server_lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "fedprox_mu",
    "mime_lr",
    "mime_eps",
)
_FED_STRS = ("server_optimizer", "algorithm")


def parse_federated(cfg: dict):
    """(model config, federated config, data section, warm-start path or None)."""
    _check_keys(cfg, _FED_KEYS, "config")
    for section in ("model", "data"):
        if section not in cfg:
            raise ConfigError(f"missing required key {section!r} in config")
    mcfg = parse_model(cfg["model"])
    data_obj = _require_mapping(cfg["data"], "data")
    _check_data_shape(data_obj)
    defaults = FederatedConfig(rounds=1, clients_per_round=1)
    kwargs = {
        "rounds": _take(cfg, "rounds", "int", "config"),
        "clients_per_round": _take(cfg, "clients_per_round", "int", "config"),
    }
    for key in _FED_INTS[2:]:
        kwargs[key] = _take(cfg, key, "int", "config", getattr(defaults, key))
    for key in _FED_NUMS:
        kwargs[key] = _take(cfg, key, "num", "config", getattr(defaults, key))
    for key in _FED_STRS:
        kwargs[key] = _take(cfg, key, "str", "config", getattr(defaults, key))
    kwargs["pvt_fraction"] = _take(cfg, "pvt_fraction", "num", "config", None)
    if "download" in cfg:
        kwargs["download"] = parse_quant(cfg["download"], "download")
    if "upload" in cfg:
        kwargs["upload"] = parse_quant(cfg["upload"], "upload")
    warm_start = _take(cfg, "warm_start", "str", "config", None)
    try:
        fcfg = FederatedConfig(**kwargs).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return mcfg, fcfg, data_obj, warm_start


_DATA_KEYS = {"partition", "eval_partition", "synthetic", "eval_fraction"}
_SYNTH_KEYS = {"num_clients", "seqs_per_client", "vocab_size", "skew", "min_len", "max_len", "alpha"}


def _check_data_shape(obj: dict):
    """Structural checks on the data section, run before any data is built so
    that cost-only invocations still reject malformed configs."""
    _check_keys(obj, _DATA_KEYS, "data")
    has_partition = "partition" in obj
    has_synth = "synthetic" in obj
    if has_partition == has_synth:
        raise ConfigError("data requires exactly one of 'partition' or 'synthetic'")
    if has_synth:
        if "eval_partition" in obj:
            raise ConfigError("key 'eval_partition' in data requires 'partition'")
        _check_keys(_require_mapping(obj["synthetic"], "synthetic"), _SYNTH_KEYS, "synthetic")


def build_data(obj: dict, mcfg: model.ModelConfig, seed: int):
    """Materialize (client datasets, eval sequences) from the data section.

    Either "partition" (client_id<TAB>text file, with "eval_partition" or an
    "eval_fraction" holdout) or "synthetic" (on-the-fly bigram corpus, always
    split by "eval_fraction").  The vocabulary is built from the training
    texts, capped at the model's vocab_size.
    """
    _check_data_shape(obj)
    fraction = _take(obj, "eval_fraction", "num", "data", 0.1)

    if "synthetic" in obj:
        synth = _require_mapping(obj["synthetic"], "synthetic")
        try:
            rows = datamod.synth_generate(
                num_clients=_take(synth, "num_clients", "int", "synthetic"),
                seqs_per_client=_take(synth, "seqs_per_client", "int", "synthetic"),
                vocab_size=_take(synth, "vocab_size", "int", "synthetic", mcfg.vocab_size),
                skew=_take(synth, "skew", "num", "synthetic", 0.7),
                rng=Prng(seed).child("data"),
                min_len=_take(synth, "min_len", "int", "synthetic", 5),
                max_len=_take(synth, "max_len", "int", "synthetic", 20),
                alpha=_take(synth, "alpha", "num", "synthetic", 0.15),
            )
        except ValueError as exc:
            raise ConfigError(f"synthetic: {exc}") from exc
        vocab = datamod.build_vocab((text for _, text in rows), mcfg.vocab_size)
        datasets = [
            datamod.ClientDataset(cid, [ids for ids in (datamod.encode(vocab, t) for t in texts) if ids])
            for cid, texts in datamod.group_rows(rows)
        ]
        return _split(datasets, fraction, seed)

    path = _take(obj, "partition", "str", "data")
    rows = datamod.read_partition(path)
    vocab = datamod.build_vocab((text for _, text in rows), mcfg.vocab_size)
    datasets = datamod.load_partition(path, vocab)
    if "eval_partition" in obj:
        eval_rows = datamod.read_partition(_take(obj, "eval_partition", "str", "data"))
        eval_sequences = [ids for ids in (datamod.encode(vocab, t) for _, t in eval_rows) if ids]
        return datasets, eval_sequences
    return _split(datasets, fraction, seed)


def _split(datasets, fraction: float, seed: int):
    try:
        return datamod.split_eval(datasets, fraction, Prng(seed))
    except ValueError as exc:
        raise ConfigError(f"eval_fraction: {exc}") from exc


# ---- cost accounting -----------------------------------------------------------


def cost_summary(mcfg: model.ModelConfig, fcfg: FederatedConfig) -> dict:
    """Projected per-client transfer totals from the declared configuration."""
    n = model.count_params(mcfg)
    down_bits = ideal_bits_per_value(fcfg.download.scheme, fcfg.download.bits)
    up_bits = ideal_bits_per_value(fcfg.upload.scheme, fcfg.upload.bits)
    frac = 1.0 if fcfg.pvt_fraction is None else fcfg.pvt_fraction
    up_n = int(round(frac * n))
    down_gb = cost_gb(n, down_bits, fcfg.rounds)
    up_gb = cost_gb(up_n, up_bits, fcfg.rounds)
    return {
        "param_count": n,
        "rounds": fcfg.rounds,
        "download_bits_per_value": down_bits,
        "upload_bits_per_value": up_bits,
        "nominal_upload_params": up_n,
        "projected_download_gb": down_gb,
        "projected_upload_gb": up_gb,
        "projected_total_gb": down_gb + up_gb,
    }


def _print_cost(summary: dict):
    print(f"model parameters    {summary['param_count']:,}")
    print(
        f"download            {summary['download_bits_per_value']:.4g} bits/value"
        f"  {summary['projected_download_gb']:.2f} GB over {summary['rounds']} rounds"
    )
    print(
        f"upload              {summary['upload_bits_per_value']:.4g} bits/value"
        f"  {summary['projected_upload_gb']:.2f} GB over {summary['rounds']} rounds"
        f"  ({summary['nominal_upload_params']:,} values/round)"
    )
    print(f"total               {summary['projected_total_gb']:.2f} GB per client")


def _config_sha1(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()


def _write_manifest(out_dir, manifest: dict):
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---- subcommands ---------------------------------------------------------------


def cmd_federated(args) -> int:
    cfg = _load_config(args.config)
    mcfg, fcfg, data_obj, warm_start = parse_federated(cfg)
    summary = cost_summary(mcfg, fcfg)
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = {
        "command": "federated",
        "seed": args.seed,
        "config": cfg,
        "config_sha1": _config_sha1(cfg),
        "model": {
            "arch": mcfg.arch,
            "vocab_size": mcfg.vocab_size,
            "embed_dim": mcfg.embed_dim,
            "layer_size": mcfg.layer_size,
            "num_layers": mcfg.num_layers,
            "param_count": summary["param_count"],
        },
        "cost_summary": summary,
    }
    if args.cost_only:
        _print_cost(summary)
        _write_manifest(args.out_dir, manifest)
        return 0

    population, eval_sequences = build_data(data_obj, mcfg, args.seed)
    initial = None
    if warm_start is not None:
        initial = load_checkpoint(warm_start)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    result = run_experiment(
        mcfg, fcfg, population, eval_sequences, args.seed, metrics_path=metrics_path, initial_arrays=initial
    )
    ckpt_path = os.path.join(args.out_dir, "final.ckpt")
    save_checkpoint(ckpt_path, result.params)
    summary["realized_download_gb"] = result.ledger.cum_download_bytes / 1e9
    summary["realized_upload_gb"] = result.ledger.cum_upload_bytes / 1e9
    manifest["final_perplexity"] = result.final_perplexity
    manifest["artifacts"] = {"metrics": "metrics.csv", "checkpoint": "final.ckpt"}
    _write_manifest(args.out_dir, manifest)
    _print_cost(summary)
    print(f"realized            {summary['realized_download_gb']:.4f} GB down, {summary['realized_upload_gb']:.4f} GB up")
    print(f"final perplexity    {result.final_perplexity:.4f}")
    print(f"metrics             {metrics_path}")
    return 0


_PRETRAIN_KEYS = {"model", "data", "steps", "lr", "batch_size", "clipnorm"}


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, _PRETRAIN_KEYS, "config")
    for section in ("model", "data"):
        if section not in cfg:
            raise ConfigError(f"missing required key {section!r} in config")
    mcfg = parse_model(cfg["model"])
    data_obj = _require_mapping(cfg["data"], "data")
    steps = _take(cfg, "steps", "int", "config")
    if steps < 1:
        raise ConfigError("key 'steps' in config must be at least 1")
    lr = _take(cfg, "lr", "num", "config", 5e-5)
    batch_size = _take(cfg, "batch_size", "int", "config", 16)
    clipnorm = _take(cfg, "clipnorm", "num", "config", 0.0)
    if lr <= 0:
        raise ConfigError("key 'lr' in config must be positive")
    if batch_size < 1:
        raise ConfigError("key 'batch_size' in config must be at least 1")
    if clipnorm < 0:
        raise ConfigError("key 'clipnorm' in config must be non-negative")

    population, _ = build_data(data_obj, mcfg, args.seed)
    pooled = [seq for ds in population for seq in ds.sequences]
    params, losses = centralized_pretrain(mcfg, pooled, steps, lr, batch_size, args.seed, clipnorm)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "pretrained.ckpt")
    save_checkpoint(ckpt_path, params)
    manifest = {
        "command": "pretrain",
        "seed": args.seed,
        "config": cfg,
        "config_sha1": _config_sha1(cfg),
        "steps": steps,
        "first_loss": losses[0],
        "final_loss": losses[-1],
        "artifacts": {"checkpoint": "pretrained.ckpt"},
    }
    _write_manifest(args.out_dir, manifest)
    print(f"pretrained {steps} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint          {ckpt_path}")
    return 0


def _read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: expected header {CSV_HEADER!r}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}: malformed row {line!r}")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _run_label(path: str) -> str:
    """File stem, or the parent directory for the conventional metrics.csv."""
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem == "metrics":
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        if parent:
            return parent
    return stem


def cmd_report(args) -> int:
    merged = ["run," + CSV_HEADER + ",cum_total_gb"]
    for path in args.csvs:
        rows = _read_metrics(path)
        run = _run_label(path)
        for r, ppl, down, up, trainable in rows:
            total_gb = (down + up) / 1e9
            merged.append(f"{run},{r},{ppl!r},{down!r},{up!r},{trainable!r},{total_gb!r}")
        final = rows[-1]
        print(
            f"{run}: round {final[0]}, perplexity {final[1]:.4f}, "
            f"download {final[2] / 1e9:.4f} GB, upload {final[3] / 1e9:.4f} GB, "
            f"total {(final[2] + final[3]) / 1e9:.4f} GB"
        )
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(merged) + "\n")
        print(f"merged              {args.out}")
    return 0


# ---- entry point ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlm", description="Federated language model training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    fed = sub.add_parser("federated", help="run a federated experiment")
    fed.add_argument("--config", required=True, help="JSON config file")
    fed.add_argument("--seed", type=int, default=0)
    fed.add_argument("--out-dir", default=".", help="directory for metrics/checkpoint/manifest")
    fed.add_argument("--cost-only", action="store_true", help="print projected transfer costs and exit")
    fed.set_defaults(func=cmd_federated)

    pre = sub.add_parser("pretrain", help="centralized pretraining for warm starts")
    pre.add_argument("--config", required=True, help="JSON config file")
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--out-dir", default=".")
    pre.set_defaults(func=cmd_pretrain)

    rep = sub.add_parser("report", help="summarize metrics CSV files")
    rep.add_argument("csvs", nargs="+", help="metrics.csv files to summarize")
    rep.add_argument("--out", default=None, help="write a merged CSV here")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 3
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
