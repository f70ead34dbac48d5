"""Command-line front end: pretrain -> metatrain -> eval -> report.

Configuration is flat ``key = value`` text plus command-line overrides
(flags win). Every run directory receives a resolved config snapshot, the
checkpoints, and CSV logs, so each reported number is reproducible from
the artifacts alone.

Exit codes: 2 config error, 3 data/protocol error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path

from .data import (ImageDataset, load_dataset, load_split, synth_dataset, synth_split)
from .encoder import EncoderConfig, build_encoder, load_encoder
from .errors import ConfigError, DataError, NumericDomainError, ProtocolError
from .evaluation import (CrossDomainReport, Protocol, SupervisedTrainConfig,
                         cross_domain_evaluate, evaluate, evaluate_frozen_nn,
                         markdown_table, read_summary_csv, supervised_baseline,
                         write_episode_csv, write_summary_csv)
from .meta import MetaTrainConfig, meta_train, write_episode_log
from .ssl import AugmentConfig, PretrainConfig, pretrain, write_loss_curve

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _to_bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _to_int_list(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(part) for part in str(s).split(",") if part.strip())


# key -> (default, converter); shared keys first
_COMMON = {
    "seed": (0, int),
    "data": ("synth", str),
    "split": ("", str),
    "out": ("", str),
    "resolution": (32, int),
    "workers": (0, int),           # 0 = respect PROTOFEW_THREADS / serial
    "synth_classes": (20, int),
    "synth_per_class": (60, int),
    "synth_seed": (1234, int),
    "synth_palette": ("A", str),
    "synth_train": (13, int),
    "synth_val": (2, int),
    "synth_test": (5, int),
}

_ENCODER_KEYS = {
    "ndf": (32, int),
    "ndepth": (4, int),
    "nrkhs": (64, int),
    "local_scales": ((5, 7), _to_int_list),
}

_SCHEMAS = {
    "pretrain": {**_COMMON, **_ENCODER_KEYS,
                 "epochs": (20, int), "batch_size": (32, int), "lr": (2e-4, float),
                 "crop_min_area": (0.3, float), "jitter": (0.4, float),
                 "flip_p": (0.5, float)},
    "metatrain": {**_COMMON, **_ENCODER_KEYS,
                  "checkpoint": ("", str), "from_scratch": (False, _to_bool),
                  "episodes": (500, int), "way": (5, int), "shot": (1, int),
                  "queries": (15, int), "lr": (1e-4, float)},
    "supervised": {**_COMMON, **_ENCODER_KEYS,
                   "epochs": (15, int), "batch_size": (32, int), "lr": (2e-4, float)},
    "eval": {**_COMMON,
             "checkpoint": ("", str), "episodes": (600, int), "way": (5, int),
             "shot": (5, int), "queries": (15, int), "no_meta": (False, _to_bool)},
    "crosseval": {**_COMMON,
                  "checkpoint": ("", str), "episodes": (600, int), "way": (5, int),
                  "shots": ((5, 20, 50), _to_int_list), "queries": (15, int)},
}


def _parse_config_file(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults <- config file <- CLI flags, with unknown keys rejected."""
    schema = _SCHEMAS[command]
    unknown = sorted(set(file_values) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")
    resolved = {}
    for key, (default, conv) in schema.items():
        value = default
        if key in file_values:
            try:
                value = conv(file_values[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        if flag_values.get(key) is not None:
            value = flag_values[key]
            if not isinstance(value, type(default)) and conv in (int, float, str):
                value = conv(value)
            elif conv is _to_int_list:
                value = _to_int_list(value)
        resolved[key] = value
    return resolved


def _snapshot(config: dict, out_dir: Path) -> None:
    lines = [f"{k} = {_fmt_value(v)}" for k, v in sorted(config.items())]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _fmt_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _run_dir(config: dict, command: str) -> Path:
    if config["out"]:
        out = Path(config["out"])
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
        out = Path("runs") / f"{command}-{stamp}-{config['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_section(config: dict, section: str) -> ImageDataset:
    """Dataset for one split section; 'synth' builds the seeded fixture."""
    spec = config["data"]
    if not spec:
        raise DataError("no data path given (use --data)")
    if spec == "synth":
        full = synth_dataset(config["synth_classes"], config["synth_per_class"],
                             config["resolution"], config["synth_seed"],
                             palette=config["synth_palette"])
        split = synth_split(full, config["synth_train"], config["synth_val"],
                            config["synth_test"])
        return full.subset(split.section(section))
    root = Path(spec)
    if not root.is_dir():
        raise DataError(f"data path not found: {root}")
    split_file = Path(config["split"]) if config["split"] else root / "split.csv"
    split = load_split(split_file)
    return load_dataset(root, split, section)


def _encoder_config(config: dict) -> EncoderConfig:
    return EncoderConfig(ndf=config["ndf"], ndepth=config["ndepth"],
                         nrkhs=config["nrkhs"],
                         input_resolution=config["resolution"],
                         local_scales=tuple(config["local_scales"]))


def _workers_arg(config: dict):
    return config["workers"] if config["workers"] > 0 else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(config: dict) -> int:
    out = _run_dir(config, "pretrain")
    _snapshot(config, out)
    dataset = _load_section(config, "train")
    encoder = build_encoder(_encoder_config(config), config["seed"])
    aug = AugmentConfig(crop_area=(config["crop_min_area"], 1.0),
                        flip_p=config["flip_p"], jitter=config["jitter"])
    pcfg = PretrainConfig(epochs=config["epochs"], batch_size=config["batch_size"],
                          lr=config["lr"], seed=config["seed"],
                          resolution=config["resolution"], augment=aug)
    print(f"pretraining on {dataset.root} ({len(dataset.all_records())} images, "
          f"{dataset.num_classes} classes)")
    _, curve = pretrain(dataset, encoder, pcfg,
                        checkpoint_path=out / "encoder.pft",
                        log_path=out / "loss.csv")
    print(f"epoch losses: first={curve[0][1]:.4f} last={curve[-1][1]:.4f}")
    print(f"artifacts in {out}")
    return 0


def cmd_metatrain(config: dict) -> int:
    out = _run_dir(config, "metatrain")
    dataset = _load_section(config, "train")
    if config["from_scratch"]:
        encoder = build_encoder(_encoder_config(config), config["seed"])
        lineage = "from_scratch"
    else:
        if not config["checkpoint"]:
            raise ConfigError("metatrain needs --checkpoint or from_scratch = true")
        encoder = load_encoder(config["checkpoint"])
        lineage = str(config["checkpoint"])
    snapshot = dict(config)
    snapshot["lineage"] = lineage
    _snapshot(snapshot, out)
    mcfg = MetaTrainConfig(way=config["way"], shot=config["shot"],
                           queries=config["queries"], episodes=config["episodes"],
                           lr=config["lr"], seed=config["seed"],
                           resolution=config["resolution"])
    print(f"meta-training ({mcfg.way}-way {mcfg.shot}-shot, {mcfg.episodes} episodes) "
          f"from {lineage}")
    _, log = meta_train(encoder, dataset, mcfg,
                        checkpoint_path=out / "encoder.pft",
                        log_path=out / "episodes.csv")
    first = [acc for _, _, acc in log[:100]]
    last = [acc for _, _, acc in log[-100:]]
    print(f"episode accuracy: first-100={sum(first) / len(first):.3f} "
          f"last-100={sum(last) / len(last):.3f}")
    print(f"artifacts in {out}")
    return 0


def cmd_supervised(config: dict) -> int:
    out = _run_dir(config, "supervised")
    _snapshot(config, out)
    dataset = _load_section(config, "train")
    scfg = SupervisedTrainConfig(epochs=config["epochs"], batch_size=config["batch_size"],
                                 lr=config["lr"], seed=config["seed"],
                                 resolution=config["resolution"])
    print(f"supervised pretraining on {dataset.root} ({dataset.num_classes} classes)")
    encoder = supervised_baseline(dataset, _encoder_config(config), scfg)
    encoder.save(out / "encoder.pft")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(config: dict) -> int:
    out = _run_dir(config, "eval")
    _snapshot(config, out)
    if not config["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    encoder = load_encoder(config["checkpoint"])
    dataset = _load_section(config, "test")
    proto = Protocol(way=config["way"], shot=config["shot"], queries=config["queries"],
                     episodes=config["episodes"], seed=config["seed"],
                     resolution=config["resolution"])
    runner = evaluate_frozen_nn if config["no_meta"] else evaluate
    report = runner(encoder, dataset, proto, workers=_workers_arg(config),
                    checkpoint_id=str(config["checkpoint"]))
    write_episode_csv(out / "episodes.csv", report)
    write_summary_csv(out / "summary.csv", [report])
    label = report.protocol.label + (f" [{report.tag}]" if report.tag else "")
    table = markdown_table({"this-run": {label: (report.mean_accuracy,
                                                 report.ci95_halfwidth)}})
    (out / "table.md").write_text(table)
    print(f"{label}: {report.formatted()} over {report.episodes} episodes")
    print(f"artifacts in {out}")
    return 0


def _parse_targets(config: dict) -> dict:
    """Target spec: comma-separated 'label:synth:<palette>:<seed>' or
    'label:<folder>' entries."""
    specs = [s for s in str(config["data"]).split(",") if s.strip()]
    if not specs:
        raise DataError("crosseval needs at least one target in --data")
    targets: dict = {}
    for spec in specs:
        parts = spec.split(":")
        if len(parts) >= 2 and parts[1] == "synth":
            palette = parts[2] if len(parts) > 2 else config["synth_palette"]
            seed = int(parts[3]) if len(parts) > 3 else config["synth_seed"]
            full = synth_dataset(config["synth_classes"], config["synth_per_class"],
                                 config["resolution"], seed, palette=palette)
            split = synth_split(full, config["synth_train"], config["synth_val"],
                                config["synth_test"])
            targets[parts[0]] = full.subset(split.section("test"))
        elif len(parts) == 2:
            sub = dict(config)
            sub["data"] = parts[1]
            targets[parts[0]] = _load_section(sub, "test")
        else:
            raise DataError(f"bad crosseval target spec: {spec!r}")
    return targets


def cmd_crosseval(config: dict) -> int:
    out = _run_dir(config, "crosseval")
    _snapshot(config, out)
    if not config["checkpoint"]:
        raise ConfigError("crosseval needs --checkpoint")
    encoder = load_encoder(config["checkpoint"])
    targets = _parse_targets(config)
    protocols = [Protocol(way=config["way"], shot=s, queries=config["queries"],
                          episodes=config["episodes"], seed=config["seed"],
                          resolution=config["resolution"])
                 for s in config["shots"]]
    report: CrossDomainReport = cross_domain_evaluate(
        encoder, targets, protocols, workers=_workers_arg(config),
        checkpoint_id=str(config["checkpoint"]))
    write_summary_csv(out / "summary.csv", report.cells)
    rows: dict = {}
    for rep in report.cells:
        rows.setdefault(rep.dataset_id, {})[rep.protocol.label] = (
            rep.mean_accuracy, rep.ci95_halfwidth)
    table = markdown_table(rows)
    table += f"\nGrand mean over {len(report.cells)} cells: {report.grand_mean * 100:.2f}%\n"
    (out / "table.md").write_text(table)
    for rep in report.cells:
        print(f"{rep.dataset_id} {rep.protocol.label}: {rep.formatted()}")
    print(f"grand mean: {report.grand_mean * 100:.2f}%")
    print(f"artifacts in {out}")
    return 0


def cmd_report(run_dirs, out_path: str | None = None) -> int:
    rows: dict = {}
    for run in run_dirs:
        run = Path(run)
        summary = run / "summary.csv"
        entries = read_summary_csv(summary)
        multiple = len({e["dataset"] for e in entries}) > 1
        for e in entries:
            label = run.name if not multiple else f"{run.name}/{e['dataset']}"
            rows.setdefault(label, {})[e["protocol"]] = (e["mean"], e["ci95"])
    table = markdown_table(rows)
    if out_path:
        Path(out_path).write_text(table)
        print(f"wrote {out_path}")
    else:
        print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("--out")
    p.add_argument("--resolution", type=int)
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protofew",
                                     description="few-shot pipeline at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    for flag in ("--ndf", "--ndepth", "--nrkhs"):
        p.add_argument(flag, type=int)
    p.add_argument("--local-scales", dest="local_scales")

    p = sub.add_parser("metatrain", help="episodic fine-tuning")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--from-scratch", dest="from_scratch", action="store_const", const=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--lr", type=float)
    for flag in ("--ndf", "--ndepth", "--nrkhs"):
        p.add_argument(flag, type=int)
    p.add_argument("--local-scales", dest="local_scales")

    p = sub.add_parser("supervised", help="label-supervised pretraining baseline")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    for flag in ("--ndf", "--ndepth", "--nrkhs"):
        p.add_argument(flag, type=int)
    p.add_argument("--local-scales", dest="local_scales")

    p = sub.add_parser("eval", help="episodic evaluation")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--no-meta", dest="no_meta", action="store_const", const=True,
                   help="tag the run as the frozen nearest-centroid ablation")

    p = sub.add_parser("crosseval", help="cross-domain evaluation grid")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shots")
    p.add_argument("--queries", type=int)

    p = sub.add_parser("report", help="combine run summaries into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    return parser


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "metatrain": cmd_metatrain,
    "supervised": cmd_supervised,
    "eval": cmd_eval,
    "crosseval": cmd_crosseval,
}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args.run_dirs, args.out)
    file_values = _parse_config_file(Path(args.config)) if args.config else {}
    flag_values = {k: v for k, v in vars(args).items()
                   if k not in ("command", "config")}
    config = resolve_config(args.command, file_values, flag_values)
    return _COMMANDS[args.command](config)


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ProtocolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
