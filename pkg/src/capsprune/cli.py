"""Command-line driver: ``capsprune {train,prune,flops,bench}``.

Every field of :class:`ExperimentConfig` can come from a flat JSON file given
with ``--config`` and be overridden by the flag of the same name.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import bench as benchmod
from . import persist, report
from .capsnet import CapsNetConfig, accuracy, init_model
from .data import DatasetSplit, holdout, load_cifar10_dir, load_idx, synth_dataset
from .errors import ArgumentError, CapsPruneError
from .flops import flops_report
from .pruning import CRITERIA, TAYLOR_ABS, default_schedule, parse_schedule, prune_loop
from .training import train

log = logging.getLogger("capsprune")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synth"              # synth | idx | cifar10
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    data_dir: Optional[str] = None      # cifar10 binary batches
    holdout: int = 0                    # >0: test set = last N training items
    synth_train: int = 2000
    synth_test: int = 500
    synth_classes: int = 2
    synth_noise: float = 0.15
    image_size: int = 28                # synth only; real data define their own
    # model
    conv1_filters: int = 256
    capsule_types: int = 32
    pc_dim: int = 8
    out_caps_dim: int = 16
    num_classes: Optional[int] = None
    routing_iters: int = 3
    routing_grad: str = "final"
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_down: float = 0.5
    recon_weight: float = 0.0005
    decoder_widths: Optional[list] = None
    # training / pruning
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    criterion: str = "taylor"
    schedule: Optional[str] = None      # "step:floor,..."; default derived from the capsule count
    finetune_epochs: int = 50
    warmup_epochs: int = 1
    scoring_updates: bool = False
    taylor_abs: str = "batch"           # batch | sample
    # io / benchmarking
    out: str = "runs/experiment"
    checkpoint: list = field(default_factory=list)
    repeats: int = 5
    bench_batch: int = 100
    n_remaining: Optional[int] = None
    threads: int = 1                    # bench only; 0 = library default

    def validate(self) -> None:
        if self.criterion not in CRITERIA:
            raise ArgumentError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.taylor_abs not in TAYLOR_ABS:
            raise ArgumentError(f"taylor_abs must be one of {TAYLOR_ABS}, got {self.taylor_abs!r}")
        if self.dataset not in ("synth", "idx", "cifar10"):
            raise ArgumentError(f"dataset must be synth, idx or cifar10, got {self.dataset!r}")
        if not isinstance(self.seed, int):
            raise ArgumentError("seed must be an explicit integer")


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def load_config(path: Optional[str], overrides: dict) -> ExperimentConfig:
    values = {}
    if path:
        values = json.loads(Path(path).read_text())
        unknown = set(values) - set(FIELDS)
        if unknown:
            raise ArgumentError(f"unknown config fields: {sorted(unknown)}")
    values.update(overrides)
    if isinstance(values.get("checkpoint"), str):
        values["checkpoint"] = [values["checkpoint"]]
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def _csv_ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _add_field_flags(p: argparse.ArgumentParser) -> None:
    for name, f in FIELDS.items():
        flags = [f"--{name}"] + ([f"--{name.replace('_', '-')}"] if "_" in name else [])
        kw = {"dest": name, "default": argparse.SUPPRESS}
        default = f.default if f.default is not dataclasses.MISSING else None
        if name == "checkpoint":
            p.add_argument(*flags, action="append", help="checkpoint path (repeatable for bench)", **kw)
        elif name == "decoder_widths":
            p.add_argument(*flags, type=_csv_ints, help="comma-separated widths", **kw)
        elif isinstance(default, bool):
            p.add_argument(*flags, action=argparse.BooleanOptionalAction, **kw)
        elif name in ("num_classes", "n_remaining"):
            p.add_argument(*flags, type=int, **kw)
        elif isinstance(default, int):
            p.add_argument(*flags, type=int, **kw)
        elif isinstance(default, float):
            p.add_argument(*flags, type=float, **kw)
        else:
            p.add_argument(*flags, type=str, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsprune", description="Capsule network primary-capsule pruning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a baseline model and save its best checkpoint",
        "prune": "run the staged prune/fine-tune loop from a checkpoint",
        "flops": "analytic FLOPS report for a surviving-capsule count",
        "bench": "median inference time for one or more checkpoints",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", default=None, help="flat JSON experiment config")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_field_flags(p)
    return parser


# ---------------------------------------------------------------- helpers


def load_data(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if cfg.dataset == "synth":
        train_set = synth_dataset(cfg.synth_train, cfg.image_size, cfg.synth_classes, cfg.seed, noise=cfg.synth_noise)
        test_set = synth_dataset(cfg.synth_test, cfg.image_size, cfg.synth_classes, cfg.seed + 1_000_003,
                                 noise=cfg.synth_noise)
        return train_set, test_set
    if cfg.dataset == "idx":
        if not (cfg.train_images and cfg.train_labels):
            raise ArgumentError("idx dataset needs train_images and train_labels")
        train_set = load_idx(cfg.train_images, cfg.train_labels, "train", cfg.num_classes)
        if cfg.holdout:
            return holdout(train_set, cfg.holdout)
        if not (cfg.test_images and cfg.test_labels):
            raise ArgumentError("idx dataset needs test_images and test_labels (or holdout)")
        return train_set, load_idx(cfg.test_images, cfg.test_labels, "test", cfg.num_classes)
    if not cfg.data_dir:
        raise ArgumentError("cifar10 dataset needs data_dir")
    train_set, test_set = load_cifar10_dir(cfg.data_dir)
    if cfg.holdout:
        return holdout(train_set, cfg.holdout)
    return train_set, test_set


def model_config(cfg: ExperimentConfig, train_set: DatasetSplit, test_set: DatasetSplit) -> CapsNetConfig:
    classes = cfg.num_classes or max(train_set.num_classes, test_set.num_classes)
    widths = None
    if cfg.decoder_widths:
        widths = tuple(cfg.decoder_widths)
        if len(widths) == 2:
            widths = widths + (train_set.image_size ** 2 * train_set.channels,)
    return CapsNetConfig(
        image_size=train_set.image_size,
        image_channels=train_set.channels,
        conv1_filters=cfg.conv1_filters,
        conv2_capsule_types=cfg.capsule_types,
        pc_dim=cfg.pc_dim,
        out_caps_dim=cfg.out_caps_dim,
        num_classes=classes,
        routing_iters=cfg.routing_iters,
        routing_grad=cfg.routing_grad,
        m_plus=cfg.m_plus,
        m_minus=cfg.m_minus,
        lambda_down=cfg.lambda_down,
        recon_weight=cfg.recon_weight,
        decoder_widths=widths,
    )


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup_logging(out: Path, command: str, verbose: bool) -> None:
    root = logging.getLogger("capsprune")
    root.handlers.clear()
    root.setLevel(logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(out / f"{command}.log", mode="w")
    fh.setFormatter(fmt)
    root.addHandler(fh)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    sh.setLevel(logging.INFO if verbose else logging.WARNING)
    root.addHandler(sh)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _first_checkpoint(cfg: ExperimentConfig) -> str:
    if not cfg.checkpoint:
        raise ArgumentError("--checkpoint is required")
    return cfg.checkpoint[0]


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    train_set, test_set = load_data(cfg)
    mcfg = model_config(cfg, train_set, test_set)
    model = init_model(mcfg, cfg.seed)
    log.info("training %d-capsule model on %d images", mcfg.pc_count, len(train_set))
    best, hist = train(model, train_set, test_set, cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                       seed=cfg.seed, track_train_acc=True)
    ckpt = out / "baseline.pcpr"
    persist.save(best, ckpt, epoch=hist.best_epoch, accuracy=hist.best_acc)
    with open(out / "train_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_accuracy", "test_accuracy"])
        for i, (l, a, t) in enumerate(zip(hist.train_loss, hist.train_acc, hist.test_acc), start=1):
            w.writerow([i, repr(l), repr(a), repr(t)])
    record = {
        "command": "train",
        "checkpoint": str(ckpt),
        "pc_count": mcfg.pc_count,
        "best_epoch": hist.best_epoch,
        "best_test_accuracy": hist.best_acc,
        "test_accuracy": hist.test_acc,
        "train_accuracy": hist.train_acc,
        "config": dataclasses.asdict(cfg),
    }
    _write_json(out / "train.json", record)
    print(f"best test accuracy {hist.best_acc:.4f} at epoch {hist.best_epoch}; saved {ckpt}")
    return record


def cmd_prune(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    model, meta = persist.load_with_meta(_first_checkpoint(cfg))
    train_set, test_set = load_data(cfg)
    if cfg.schedule:
        schedule = parse_schedule(cfg.schedule, cfg.finetune_epochs, cfg.warmup_epochs)
    else:
        schedule = default_schedule(model.n_surviving, cfg.finetune_epochs)
    events = schedule.events(model.n_surviving)  # rejects impossible schedules before any work
    log.info("schedule %s: %d prune events from %d capsules", schedule.to_string(), len(events), model.n_surviving)
    baseline = meta.get("accuracy")
    if baseline is None:
        baseline = accuracy(model, test_set.images, test_set.labels)

    def save_event(rec, m):
        persist.save(m, out / f"pruned_{rec.n_remaining:05d}.pcpr", accuracy=rec.best_accuracy)

    final, records = prune_loop(model, train_set, test_set, schedule, cfg.criterion, batch_size=cfg.batch_size,
                                lr=cfg.lr, seed=cfg.seed, scoring_updates=cfg.scoring_updates,
                                abs_mode=cfg.taylor_abs, on_event=save_event)
    persist.emit_curve(records, out / "curve.csv")
    report.plot_prune_curve(records, out / "curve.png", baseline, title=f"{cfg.criterion} pruning")
    record = {
        "command": "prune",
        "criterion": cfg.criterion,
        "schedule": schedule.to_string(),
        "baseline_accuracy": baseline,
        "final_survivors": [int(s) for s in final.survivors],
        "events": [dataclasses.asdict(r) for r in records],
    }
    _write_json(out / "prune.json", record)
    for r in records:
        print(f"{r.n_remaining:6d} capsules  best accuracy {r.best_accuracy:.4f}")
    return record


def cmd_flops(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    if cfg.checkpoint:
        model = persist.load(cfg.checkpoint[0])
        mcfg = model.config
        n = cfg.n_remaining if cfg.n_remaining is not None else model.n_surviving
    else:
        widths = tuple(cfg.decoder_widths) if cfg.decoder_widths else None
        mcfg = CapsNetConfig(image_size=cfg.image_size, conv1_filters=cfg.conv1_filters,
                             conv2_capsule_types=cfg.capsule_types, pc_dim=cfg.pc_dim,
                             out_caps_dim=cfg.out_caps_dim, num_classes=cfg.num_classes or 10,
                             routing_iters=cfg.routing_iters, decoder_widths=widths)
        n = cfg.n_remaining if cfg.n_remaining is not None else mcfg.pc_count
    rep = flops_report(mcfg, n)
    _write_json(out / "flops.json", rep.to_dict())
    print(rep.render())
    return rep.to_dict()


def cmd_bench(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    if not cfg.checkpoint:
        raise ArgumentError("bench needs at least one --checkpoint")
    models = [persist.load(p) for p in cfg.checkpoint]
    _, test_set = load_data(cfg)
    if len(test_set) == 0:
        raise ArgumentError("bench needs a non-empty test set")
    results = benchmod.bench_models(models, test_set.images, cfg.repeats, cfg.bench_batch,
                                    single_thread=cfg.threads == 1)
    ups = benchmod.speedups(results)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_pcs", "median_s", "samples_per_s", "speedup"])
        for r, s in zip(results, ups):
            w.writerow([r.n_pcs, repr(r.median_s), repr(r.samples_per_s), repr(s)])
    report.plot_bench(results, out / "bench.png", title=f"{len(test_set)} test images")
    record = {"command": "bench", "repeats": cfg.repeats, "samples": len(test_set),
              "results": [r.to_dict() for r in results], "speedup": ups}
    _write_json(out / "bench.json", record)
    print(f"{'capsules':>8}  {'median s':>10}  {'samples/s':>10}  speedup")
    for r, s in zip(results, ups):
        print(f"{r.n_pcs:8d}  {r.median_s:10.4f}  {r.samples_per_s:10.1f}  {s:.2f}x")
    return record


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "flops": cmd_flops, "bench": cmd_bench}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config")
    verbose = args.pop("verbose")
    try:
        cfg = load_config(config_path, args)
        _setup_logging(_out_dir(cfg), command, verbose)
        COMMANDS[command](cfg)
    except (CapsPruneError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"capsprune {command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
