"""Command-line entry point.

Every command resolves its parameters from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags (flags win), and writes
the resolved configuration as ``config.json`` next to its outputs.  Running
the same command with ``--config <out>/config.json`` reproduces the outputs
byte for byte (``timing.json`` holds wall-clock and is the one exception).

Exit codes: 0 success, 1 validation or usage error, 2 I/O error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import LabeledDataset, SynthConfig, export_csv, generate_synthetic, ingest_csv
from .errors import DimensionError, LrVaeError, NumericalError, ValidationError
from .experiments import (
    DIRECTIONS,
    emit_curve_artifacts,
    group_mask,
    run_comparison,
    run_masking_curve,
    save_json,
)
from .metrics import ProbeConfig, probe_report
from .model import VARIANTS, ModelConfig, full_mask, load_checkpoint, make_attribute_mask, mask_latent, save_checkpoint
from .training import TrainConfig, build_model, train

log = logging.getLogger("lrvae")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.json"

# model options that are not derived from the dataset
MODEL_OPTIONS = tuple(f.name for f in fields(ModelConfig)
                      if f.name not in ("n_features", "n_emotions", "n_speakers", "variant", "weight_reg"))


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for I/O
        raise UsageError(f"{self.prog}: {message}")


def _model_defaults() -> dict:
    d = ModelConfig(n_features=1, n_emotions=2, n_speakers=2).to_dict()
    return {k: d[k] for k in MODEL_OPTIONS}


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("variant")
    return d


def defaults(command: str) -> dict:
    probe = asdict(ProbeConfig())
    return copy.deepcopy({
        "gen-data": {"synth": SynthConfig().to_dict()},
        "train": {"data": None, "variant": "lr_vae", "train": _train_defaults(), "model": _model_defaults()},
        "encode": {"model": None, "data": None, "mask": "none", "cut": 0.5, "latent_dim": None},
        "eval": {"data": None, "seed": 0, "probe": probe},
        "experiment compare": {"data": None, "variants": list(VARIANTS), "seeds": [0], "cut": 0.5,
                               "train": _train_defaults(), "probe": probe, "model": _model_defaults()},
        "experiment curve": {"model": None, "data": None, "groups": 32, "direction": "bottom_up", "seed": 0,
                             "probe": probe},
    }[command])


# flag dest -> path inside the resolved config
FLAG_PATHS = {
    "gen-data": {
        "n": ("synth", "n"), "features": ("synth", "n_features"), "emotions": ("synth", "n_emotions"),
        "speakers": ("synth", "n_speakers"), "cross_leak": ("synth", "cross_leak"),
        "noise_std": ("synth", "noise_std"), "seed": ("synth", "seed"),
    },
    "train": {
        "data": ("data",), "variant": ("variant",), "seed": ("train", "seed"), "lr": ("train", "learning_rate"),
        "batch_size": ("train", "batch_size"), "max_epochs": ("train", "max_epochs"),
        "patience": ("train", "patience"), "min_epochs": ("train", "min_epochs"),
        "latent_dim": ("model", "latent_dim"), "lam": None,
    },
    "encode": {"model": ("model",), "data": ("data",), "mask": ("mask",), "cut": ("cut",),
               "latent_dim": ("latent_dim",)},
    "eval": {"data": ("data",), "seed": ("seed",), "probe_epochs": ("probe", "epochs")},
    "experiment compare": {
        "data": ("data",), "variants": ("variants",), "seeds": ("seeds",), "cut": ("cut",),
        "max_epochs": ("train", "max_epochs"), "patience": ("train", "patience"),
        "min_epochs": ("train", "min_epochs"), "latent_dim": ("model", "latent_dim"),
        "probe_epochs": ("probe", "epochs"),
    },
    "experiment curve": {"model": ("model",), "data": ("data",), "groups": ("groups",),
                         "direction": ("direction",), "seed": ("seed",), "probe_epochs": ("probe", "epochs")},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"{where}: unknown key {key!r}; expected one of {sorted(base)}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{where}.{key}")
        else:
            base[key] = value
    return base


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = defaults(command)
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ValidationError(f"{args.config}: config must be a JSON object")
        stated = doc.pop("command", command)
        if stated != command:
            raise ValidationError(f"{args.config} was written by {stated!r}, not {command!r}")
        _merge(cfg, doc, args.config)
    for dest, path in FLAG_PATHS[command].items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "lam":
            cfg["model"]["lam_emo_adv"] = cfg["model"]["lam_id_adv"] = value
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return {"command": command, **cfg}


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{cfg['command']}: missing required setting(s) {missing} (flag or config file)")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write_config(cfg: dict, out: Path) -> None:
    save_json(cfg, out / CONFIG_NAME)


def _seed_list(value) -> list[int]:
    """``3`` means seeds 0,1,2; a list or comma string is taken literally."""
    if isinstance(value, int):
        if value < 1:
            raise ValidationError("seed count must be >= 1")
        return list(range(value))
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
        if len(parts) == 1:
            return _seed_list(int(parts[0]))
        return [int(p) for p in parts]
    return [int(v) for v in value]


def _variant_list(value) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()] if isinstance(value, str) else list(value)


# commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> int:
    synth = SynthConfig.from_dict(cfg["synth"])
    ds = generate_synthetic(synth)
    _write_config(cfg, out)
    export_csv(ds, out / "data.csv")
    print(f"N={len(ds.features)} F={ds.n_features} E={ds.n_emotions} S={len(ds.speaker_vocab)} -> {out / 'data.csv'}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    _require(cfg, "data")
    tc = TrainConfig(variant=cfg["variant"], **cfg["train"])
    ds = ingest_csv(cfg["data"])
    model = build_model(ds, tc, **cfg["model"])
    _write_config(cfg, out)
    result = train(model, ds, tc)
    save_checkpoint(result.model, out / "model.json")
    with (out / "log.jsonl").open("w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"trained {tc.variant}: {len(result.log)} epochs, best epoch {result.best_epoch} -> {out / 'model.json'}")
    return EXIT_OK


def _labeled_latents(ds: LabeledDataset, z: np.ndarray) -> LabeledDataset:
    return LabeledDataset(z, ds.emotion_labels, ds.speaker_labels, ds.split, ds.emotion_vocab, ds.speaker_vocab)


def cmd_encode(cfg: dict, out: Path) -> int:
    _require(cfg, "model", "data")
    model = load_checkpoint(cfg["model"])
    dim = model.config.latent_dim
    if cfg["latent_dim"] is not None and int(cfg["latent_dim"]) != dim:
        raise DimensionError(f"--latent-dim {cfg['latent_dim']} does not match checkpoint latent dim {dim}")
    if cfg["mask"] not in ("none", "pp_ser", "pp_sv"):
        raise ValidationError(f"mask must be none, pp_ser or pp_sv, got {cfg['mask']!r}")
    mask = full_mask(dim) if cfg["mask"] == "none" else make_attribute_mask(dim, cfg["mask"], float(cfg["cut"]))
    ds = ingest_csv(cfg["data"])
    if ds.n_features != model.config.n_features:
        raise DimensionError(f"{cfg['data']} has {ds.n_features} features, checkpoint expects {model.config.n_features}")
    z = mask_latent(model.encode_mean(model.standardize_input(ds.features)), mask)
    _write_config(cfg, out)
    export_csv(_labeled_latents(ds, z), out / "embeddings.csv", feature_prefix="z_")
    print(f"encoded {len(z)} rows to {dim} dims (mask {cfg['mask']}, {int(mask.keep.sum())} kept)"
          f" -> {out / 'embeddings.csv'}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    _require(cfg, "data")
    ds = ingest_csv(cfg["data"])
    ds.require_splits("train", "test")
    probe = ProbeConfig(**cfg["probe"])
    dev = ds.subset("dev") if ds.rows("dev").size else None
    report = probe_report(ds.subset("train"), ds.subset("test"), ds.emotion_vocab, seed=int(cfg["seed"]),
                          dev=dev, config=probe)
    _write_config(cfg, out)
    save_json(report.to_dict(), out / "report.json")
    print(f"WFS {report.weighted_f_score:.4f}  EER {report.eer:.4f} ({report.trial_count} trials)"
          f" -> {out / 'report.json'}")
    return EXIT_OK


def cmd_compare(cfg: dict, out: Path) -> int:
    _require(cfg, "data")
    cfg["variants"] = _variant_list(cfg["variants"])
    cfg["seeds"] = _seed_list(cfg["seeds"])
    ds = ingest_csv(cfg["data"])
    _write_config(cfg, out)
    result = run_comparison(ds, cfg["variants"], cfg["seeds"], TrainConfig(**cfg["train"]),
                            ProbeConfig(**cfg["probe"]), float(cfg["cut"]), cfg["model"])
    save_json(result.to_dict(), out / "comparison.json")
    save_json(result.timing_dict(), out / "timing.json")
    for variant, cells in result.to_dict()["table"].items():
        for condition, cell in cells.items():
            w, e = cell["weighted_f_score"], cell["eer"]
            print(f"{variant:14s} {condition:7s} WFS {w['mean']:.4f}±{w['std']:.4f}  EER {e['mean']:.4f}±{e['std']:.4f}")
    return EXIT_OK


def cmd_curve(cfg: dict, out: Path) -> int:
    _require(cfg, "model", "data")
    if cfg["direction"] not in DIRECTIONS:
        raise ValidationError(f"direction must be one of {DIRECTIONS}, got {cfg['direction']!r}")
    model = load_checkpoint(cfg["model"])
    group_mask(model.config.latent_dim, int(cfg["groups"]), 0, cfg["direction"])
    ds = ingest_csv(cfg["data"])
    if ds.n_features != model.config.n_features:
        raise DimensionError(f"{cfg['data']} has {ds.n_features} features, checkpoint expects {model.config.n_features}")
    _write_config(cfg, out)
    curve = run_masking_curve(model, ds, int(cfg["groups"]), cfg["direction"], int(cfg["seed"]),
                              ProbeConfig(**cfg["probe"]))
    csv_path, svg_path = emit_curve_artifacts(curve, out)
    print(f"{len(curve.steps)} steps -> {csv_path}, {svg_path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "encode": cmd_encode,
    "eval": cmd_eval,
    "experiment compare": cmd_compare,
    "experiment curve": cmd_curve,
}


# parser -------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override its values")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lrvae", description="Layered-representation VAE toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--features", type=int)
    p.add_argument("--emotions", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--cross-leak", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train one model variant")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--lam", type=float, help="reversal strength for both adversaries")

    p = sub.add_parser("encode", help="encode a dataset to (optionally masked) posterior means")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--mask", help="none, pp_ser or pp_sv")
    p.add_argument("--cut", type=float)
    p.add_argument("--latent-dim", type=int, help="expected latent dimensionality (checked)")

    p = sub.add_parser("eval", help="probe embeddings and write a metric report")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--probe-epochs", type=int)

    p = sub.add_parser("experiment", help="comparison table or masking curve")
    exp = p.add_subparsers(dest="experiment", required=True, parser_class=_Parser)
    c = exp.add_parser("compare", help="train and probe several variants")
    _common(c)
    c.add_argument("--data")
    c.add_argument("--variants", help="comma-separated variant names")
    c.add_argument("--seeds", help="seed count (3 -> 0,1,2) or comma-separated list")
    c.add_argument("--cut", type=float)
    c.add_argument("--max-epochs", type=int)
    c.add_argument("--patience", type=int)
    c.add_argument("--min-epochs", type=int)
    c.add_argument("--latent-dim", type=int)
    c.add_argument("--probe-epochs", type=int)
    c = exp.add_parser("curve", help="incremental group-masking curve of a trained model")
    _common(c)
    c.add_argument("--model")
    c.add_argument("--data")
    c.add_argument("--groups", type=int)
    c.add_argument("--direction", help="bottom_up or top_down")
    c.add_argument("--seed", type=int)
    c.add_argument("--probe-epochs", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        command = args.command if args.command != "experiment" else f"experiment {args.experiment}"
        cfg = resolve(command, args)
        out = _out_dir(args)
        return COMMANDS[command](cfg, out)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (LrVaeError, ValueError, TypeError, IndexError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
