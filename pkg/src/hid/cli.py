"""Command-line pipeline: synth -> preprocess -> intents -> train -> eval -> verify.

Settings come from three layers, later ones winning: built-in defaults (or
the published preset with ``--paper-hparams``), a flat ``key = value`` config
file given by ``--config``, then command-line flags (``--seed`` and any number
of ``--set key=value``).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

from hid.dataset import (
    DataError,
    Dataset,
    generate_synthetic,
    load_attributes,
    load_sessions,
    preprocess,
)
from hid.encoder import SessionModel
from hid.evaluator import evaluate, plot_metrics, write_metrics
from hid.intent import build_hybrid_intents, load_intents, save_intents
from hid.trainer import TrainConfig, TrainingDiverged, _coerce, train
from hid.verify import verify_all

log = logging.getLogger("hid")

SYNTH_DEFAULTS = dict(n_items=1000, n_sessions=10000, n_latent_intents=8, zipf_exponent=1.2,
                      noise_rate=0.2, mean_len=5.0, attrs_per_intent=1, test_fraction=0.1)
PREPROCESS_DEFAULTS = dict(min_item_freq=5, min_session_len=2, pareto=0.2, min_prefix_len=1)
INTENT_DEFAULTS = dict(window=1)
VERIFY_DEFAULTS = dict(verify_seeds=100, verify_points=100, verify_dim=8, verify_trials=1000)


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def default_config(paper: bool = False) -> dict:
    train_cfg = TrainConfig.paper() if paper else TrainConfig()
    cfg = {**SYNTH_DEFAULTS, **PREPROCESS_DEFAULTS, **INTENT_DEFAULTS, **VERIFY_DEFAULTS}
    cfg.update(train_cfg.to_flat())
    return cfg


def resolve_config(file_values: dict, overrides: dict, paper: bool = False) -> dict:
    """Merge defaults < file < overrides, coercing strings to each key's default type."""
    cfg = default_config(paper)
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                cfg[key] = _coerce(value, cfg[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    keys = set(TrainConfig().to_flat())
    return TrainConfig.from_flat({k: v for k, v in cfg.items() if k in keys})


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


# -- manifests ----------------------------------------------------------------

def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: dict, inputs: list[Path], outputs: list[Path],
                   started: float) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": {str(p): file_hash(p) for p in inputs},
        "outputs": {str(p): file_hash(p) for p in outputs},
        "started": started,
        "finished": time.time(),
    }
    path = out_dir / f"manifest.{command}.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> tuple:
    ds = generate_synthetic(cfg["n_items"], cfg["n_sessions"], cfg["n_latent_intents"], cfg["zipf_exponent"],
                            cfg["noise_rate"], cfg["mean_len"], cfg["seed"], cfg["attrs_per_intent"],
                            cfg["test_fraction"])
    ds.save(out)
    return [], [out / "catalog.json", out / "sessions.jsonl", out / "meta.json"]


def cmd_preprocess(cfg: dict, out: Path, sessions: Path, attributes: Path | None) -> tuple:
    events = load_sessions(_require(sessions))
    attrs = load_attributes(_require(attributes)) if attributes else None
    ds = preprocess(events, attrs, cfg["min_item_freq"], cfg["min_session_len"], cfg["test_fraction"],
                    cfg["pareto"], cfg["min_prefix_len"])
    ds.save(out)
    inputs = [sessions] + ([attributes] if attributes else [])
    return inputs, [out / "catalog.json", out / "sessions.jsonl", out / "meta.json"]


def cmd_intents(cfg: dict, out: Path, data: Path) -> tuple:
    ds = Dataset.load(_require(data))
    n, k = cfg["n"], ds.catalog.k
    if not 1 <= n <= k:
        raise ConfigError(f"n={n} must lie in [1, {k}] (the number of attributes)")
    intents = build_hybrid_intents(ds.sequences("train"), ds.catalog, n, cfg["q"], cfg["seed"], cfg["window"])
    path = out / "intents.json"
    save_intents(path, intents, n, cfg["q"], cfg["seed"], {"window": cfg["window"]})
    return [data / "catalog.json", data / "sessions.jsonl"], [path]


def cmd_train(cfg: dict, out: Path, data: Path, intents_path: Path | None, no_hid: bool) -> tuple:
    if no_hid:
        cfg["epsilon"] = 0.0
    tc = train_config(cfg)
    ds = Dataset.load(_require(data))
    inputs = [data / "catalog.json", data / "sessions.jsonl"]
    intents = None
    if tc.loss.epsilon > 0 and tc.mode == "attribute":
        if intents_path is None:
            intents_path = data / "intents.json"
        intents, _ = load_intents(_require(intents_path))
        if intents.item_to_intent.size != ds.catalog.m:
            raise ConfigError(f"{intents_path} covers {intents.item_to_intent.size} items, "
                              f"dataset has {ds.catalog.m}")
        inputs.append(intents_path)
    model, history = train(ds, intents, tc, progress=True)
    model_path, hist_path = out / "model.json", out / "history.csv"
    model.save(model_path, extra={"config": tc.to_flat(), "best_epoch": history.best})
    history.write_csv(hist_path)
    return inputs, [model_path, hist_path]


def cmd_eval(cfg: dict, out: Path, data: Path, model_path: Path, plot: bool) -> tuple:
    ds = Dataset.load(_require(data))
    model = SessionModel.load(_require(model_path))
    if model.m != ds.catalog.m:
        raise ConfigError(f"{model_path} scores {model.m} items, dataset has {ds.catalog.m}")
    report = evaluate(model, ds.test, ds.catalog, cfg["K"])
    path = out / "metrics.json"
    write_metrics(path, report, {"config_hash": config_hash(cfg), "model_sha256": file_hash(model_path)})
    outputs = [path]
    if plot:
        plot_metrics(out / "metrics.svg", report)
        outputs.append(out / "metrics.svg")
    return [data / "catalog.json", data / "sessions.jsonl", model_path], outputs


def cmd_verify(cfg: dict, out: Path) -> tuple:
    report = verify_all(cfg["verify_seeds"], cfg["seed"], cfg["verify_points"], cfg["verify_dim"],
                        cfg["verify_trials"])
    path = out / "verify.json"
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [], [path], report["passed"]


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--paper-hparams", action="store_true", help="start from the published training preset")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p = sub.add_parser("preprocess", parents=[common], help="filter, split and augment raw CSV logs")
    p.add_argument("--sessions", type=Path, required=True, help="CSV with session_id,item_id,timestamp")
    p.add_argument("--attributes", type=Path, help="CSV with item_id,attribute")
    p = sub.add_parser("intents", parents=[common], help="cluster attributes into hybrid intents")
    p.add_argument("--data", type=Path, required=True)
    p = sub.add_parser("train", parents=[common], help="fit a session model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--intents", type=Path, help="intents.json (default: <data>/intents.json)")
    p.add_argument("--no-hid", action="store_true", help="train without the intent loss (epsilon = 0)")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--plot", action="store_true", help="also write metrics.svg")
    sub.add_parser("verify", parents=[common], help="numerical checks of the loss surrogates")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        out["seed"] = args.seed
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, _overrides(args), args.paper_hparams)
        train_config(cfg)  # validates the training keys up front
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        inputs = [args.config] if args.config else []
        ok = True
        if args.command == "synth":
            ins, outs = cmd_synth(cfg, out)
        elif args.command == "preprocess":
            ins, outs = cmd_preprocess(cfg, out, args.sessions, args.attributes)
        elif args.command == "intents":
            ins, outs = cmd_intents(cfg, out, args.data)
        elif args.command == "train":
            ins, outs = cmd_train(cfg, out, args.data, args.intents, args.no_hid)
        elif args.command == "eval":
            ins, outs = cmd_eval(cfg, out, args.data, args.model, args.plot)
        else:
            ins, outs, ok = cmd_verify(cfg, out)
        write_manifest(out, args.command, cfg, inputs + ins, outs, started)
    except (ConfigError, DataError, FileNotFoundError, TrainingDiverged, ValueError) as exc:
        print(f"hid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for p in outs:
        print(p)
    if not ok:
        print(f"hid {args.command}: some checks failed, see {outs[0]}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
