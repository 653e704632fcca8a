"""Experiment runner: config parsing, dataset construction, metrics emission.

Configuration is a strict two-level JSON tree; unknown keys fail loudly and
command-line flags override file values. Metrics go to a line-delimited JSON
stream (one self-describing record per line: round, entity, metric, value)
whose final record is the run summary, so streams can be tailed and reruns
with the same seed are byte-identical.

Commands:
    run            --config <path> [--seed N] [--rounds N] [--clients N]
                   [--bits {4,8}] [--rank N] [--gan {on,off}]
                   [--dataset toy|embeddings:<path>] [--out <dir>]
    export-plots   --in <metrics.jsonl> --out <dir>
    inspect-delta  <payload>

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qlora
from .adapter import AdapterConfig
from .encoder import EmbeddingDataset, SyntheticEncoder, load_embeddings, make_prototypes
from .federation import FedConfig, SimulationConfig, SimulationResult, run_simulation
from .gan import AugmentationPolicy, GanConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "ToyDatasetSpec",
    "parse_config",
    "make_toy_dataset",
    "run",
    "export_plot_data",
    "main",
]

METRICS_FILENAME = "metrics.jsonl"


class ConfigError(ValueError):
    """A configuration value is unknown, mistyped, or out of range."""


@dataclass
class AdapterSection:
    dim: int = 64
    d_ff: int = 128


@dataclass
class LoraSection:
    rank: int = 4
    alpha: float | None = None
    bits: int = 4
    block_size: int = 64


@dataclass
class GanSection:
    enabled: bool = True
    epochs: int = 1000
    z_dim: int = 8
    policy: str | int = "median"
    cap: float = 1.0


@dataclass
class TrainSection:
    local_epochs: int = 1
    batch: int = 32
    lr: float = 5e-3
    sym_text_loss: bool = False
    quantize_logits: bool = True
    count_synthetic: bool = True


@dataclass
class DatasetSection:
    kind: str = "toy"
    num_classes: int = 8
    samples_per_class: int = 100
    raw_dim: int = 16
    cluster_spread: float = 0.4
    path: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    rounds: int = 100
    n_clients: int = 5
    dirichlet_alpha: float = 0.5
    imbalance_factor: float = 10.0
    n_threads: int = 1
    out_path: str = "out"
    adapter: AdapterSection = field(default_factory=AdapterSection)
    lora: LoraSection = field(default_factory=LoraSection)
    gan: GanSection = field(default_factory=GanSection)
    train: TrainSection = field(default_factory=TrainSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)


@dataclass(frozen=True)
class ToyDatasetSpec:
    """Gaussian mixture in raw space, one unit-vector mean per class."""

    num_classes: int = 8
    samples_per_class: int = 100
    raw_dim: int = 16
    cluster_spread: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.samples_per_class < 2:
            raise ValueError("num_classes and samples_per_class must be >= 2")
        if self.raw_dim < self.num_classes:
            raise ValueError(
                f"raw_dim {self.raw_dim} must be >= num_classes {self.num_classes} "
                "(one coordinate mean per class)"
            )
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")


_SECTION_TYPES = {
    "adapter": AdapterSection,
    "lora": LoraSection,
    "gan": GanSection,
    "train": TrainSection,
    "dataset": DatasetSection,
}


def _coerce(section: str, key: str, value, target_type):
    where = f"{section}.{key}" if section else key
    if target_type is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _apply_section(obj, section_name: str, values: dict):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section_name}.{key}" if section_name
                              else f"unknown key {key}")
        ftype = fields[key].type
        base = {"int": int, "float": float, "bool": bool, "str": str}.get(
            str(ftype).split(" ")[0], None
        )
        if base in (int, float, bool):
            value = _coerce(section_name, key, value, base)
        setattr(obj, key, value)


def _validate(cfg: RunConfig) -> None:
    def check(cond, message):
        if not cond:
            raise ConfigError(message)

    check(cfg.rounds >= 0, f"rounds must be >= 0, got {cfg.rounds}")
    check(cfg.n_clients >= 1, f"n_clients must be >= 1, got {cfg.n_clients}")
    check(cfg.dirichlet_alpha > 0, f"dirichlet_alpha must be > 0, got {cfg.dirichlet_alpha}")
    check(cfg.imbalance_factor >= 1, f"imbalance_factor must be >= 1, got {cfg.imbalance_factor}")
    check(cfg.n_threads >= 1, f"n_threads must be >= 1, got {cfg.n_threads}")
    check(cfg.adapter.dim >= 1 and cfg.adapter.d_ff >= 1,
          f"adapter.dim/adapter.d_ff must be positive, got {cfg.adapter.dim}, {cfg.adapter.d_ff}")
    check(cfg.lora.bits in (4, 8), f"lora.bits ∈ {{4,8}}, got {cfg.lora.bits}")
    check(cfg.lora.rank >= 1, f"lora.rank must be >= 1, got {cfg.lora.rank}")
    check(cfg.lora.block_size >= 1, f"lora.block_size must be >= 1, got {cfg.lora.block_size}")
    check(cfg.lora.alpha is None or cfg.lora.alpha > 0,
          f"lora.alpha must be > 0, got {cfg.lora.alpha}")
    check(cfg.gan.epochs >= 0, f"gan.epochs must be >= 0, got {cfg.gan.epochs}")
    check(cfg.gan.z_dim >= 1, f"gan.z_dim must be >= 1, got {cfg.gan.z_dim}")
    check(0.0 < cfg.gan.cap <= 1.0, f"gan.cap must be in (0, 1], got {cfg.gan.cap}")
    if isinstance(cfg.gan.policy, str):
        check(cfg.gan.policy == "median",
              f'gan.policy must be "median" or a positive integer, got {cfg.gan.policy!r}')
    else:
        check(isinstance(cfg.gan.policy, int) and cfg.gan.policy >= 1,
              f'gan.policy must be "median" or a positive integer, got {cfg.gan.policy!r}')
    check(cfg.train.local_epochs >= 0, f"train.local_epochs must be >= 0, got {cfg.train.local_epochs}")
    check(cfg.train.batch >= 1, f"train.batch must be >= 1, got {cfg.train.batch}")
    check(cfg.train.lr > 0, f"train.lr must be > 0, got {cfg.train.lr}")
    check(cfg.dataset.kind in ("toy", "embeddings"),
          f'dataset.kind must be "toy" or "embeddings", got {cfg.dataset.kind!r}')
    if cfg.dataset.kind == "embeddings":
        check(bool(cfg.dataset.path), "dataset.path is required when dataset.kind is embeddings")
    else:
        check(cfg.dataset.num_classes >= 2,
              f"dataset.num_classes must be >= 2, got {cfg.dataset.num_classes}")
        check(cfg.dataset.samples_per_class >= 2,
              f"dataset.samples_per_class must be >= 2, got {cfg.dataset.samples_per_class}")
        check(cfg.dataset.raw_dim >= cfg.dataset.num_classes,
              f"dataset.raw_dim must be >= dataset.num_classes, got {cfg.dataset.raw_dim}")
        check(cfg.dataset.cluster_spread > 0,
              f"dataset.cluster_spread must be > 0, got {cfg.dataset.cluster_spread}")


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load and validate a config file; ``overrides`` take precedence.

    An empty or missing-body file means all defaults. Override keys use the
    same section.key addressing as the file (e.g. ``lora.bits``).
    """
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                tree = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
            if not isinstance(tree, dict):
                raise ConfigError(f"{path}: top level must be an object")
    cfg = RunConfig()
    scalar_keys = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTION_TYPES)
    for key, value in tree.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object of settings")
            _apply_section(getattr(cfg, key), key, value)
        elif key in scalar_keys:
            _apply_section(cfg, "", {key: value})
        else:
            raise ConfigError(f"unknown key {key}")
    for dotted, value in (overrides or {}).items():
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in _SECTION_TYPES:
                raise ConfigError(f"unknown key {dotted}")
            _apply_section(getattr(cfg, section), section, {key: value})
        else:
            if dotted not in scalar_keys:
                raise ConfigError(f"unknown key {dotted}")
            _apply_section(cfg, "", {dotted: value})
    _validate(cfg)
    return cfg


def make_toy_dataset(spec: ToyDatasetSpec, embed_dim: int
                     ) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Gaussian mixture pushed through the frozen encoder; stratified 80/20 split."""
    rng = np.random.default_rng([spec.seed, 23917])
    raws, labels = [], []
    for c in range(spec.num_classes):
        mean = np.zeros(spec.raw_dim, dtype=np.float64)
        mean[c] = 1.0
        raws.append(mean + spec.cluster_spread * rng.standard_normal(
            (spec.samples_per_class, spec.raw_dim)))
        labels.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    raw = np.vstack(raws).astype(np.float32)
    labels = np.concatenate(labels)

    enc = SyntheticEncoder(seed=spec.seed, raw_dim=spec.raw_dim, embed_dim=embed_dim)
    vectors = enc.encode_vectors(raw)

    train_idx, test_idx = [], []
    for c in range(spec.num_classes):
        idx = np.flatnonzero(labels == c)
        idx = rng.permutation(idx)
        cut = int(round(0.8 * idx.size))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    train = EmbeddingDataset(vectors[train_idx], labels[train_idx], spec.num_classes)
    test = EmbeddingDataset(vectors[test_idx], labels[test_idx], spec.num_classes)
    return train, test


def build_simulation(cfg: RunConfig):
    """Turn a RunConfig into datasets, prototypes, and module-level configs."""
    adapter_cfg = AdapterConfig(
        dim=cfg.adapter.dim,
        d_ff=cfg.adapter.d_ff,
        quantize_logits=cfg.train.quantize_logits,
        sym_text_loss=cfg.train.sym_text_loss,
    )
    if cfg.dataset.kind == "toy":
        spec = ToyDatasetSpec(
            num_classes=cfg.dataset.num_classes,
            samples_per_class=cfg.dataset.samples_per_class,
            raw_dim=cfg.dataset.raw_dim,
            cluster_spread=cfg.dataset.cluster_spread,
            seed=cfg.seed,
        )
        train, test = make_toy_dataset(spec, embed_dim=adapter_cfg.dim)
    else:
        full = load_embeddings(cfg.dataset.path)
        if full.dim != adapter_cfg.dim:
            raise ConfigError(
                f"adapter.dim {adapter_cfg.dim} does not match embedding dim {full.dim} "
                f"in {cfg.dataset.path}"
            )
        rng = np.random.default_rng([cfg.seed, 23917])
        train_idx, test_idx = [], []
        for c in range(full.num_classes):
            idx = rng.permutation(np.flatnonzero(full.labels == c))
            cut = int(round(0.8 * idx.size))
            train_idx.append(idx[:cut])
            test_idx.append(idx[cut:])
        train = full.subset(np.sort(np.concatenate(train_idx)))
        test = full.subset(np.sort(np.concatenate(test_idx)))
    prototypes = make_prototypes(train.num_classes, adapter_cfg.dim, seed=cfg.seed)
    sim = SimulationConfig(
        adapter=adapter_cfg,
        fed=FedConfig(
            n_clients=cfg.n_clients,
            rounds=cfg.rounds,
            dirichlet_alpha=cfg.dirichlet_alpha,
            imbalance_factor=cfg.imbalance_factor,
            local_epochs=cfg.train.local_epochs,
            batch=cfg.train.batch,
            lr=cfg.train.lr,
            rank=cfg.lora.rank,
            lora_alpha=cfg.lora.alpha,
            bits=cfg.lora.bits,
            block_size=cfg.lora.block_size,
            count_synthetic=cfg.train.count_synthetic,
            n_threads=cfg.n_threads,
            seed=cfg.seed,
        ),
        gan_enabled=cfg.gan.enabled,
        gan=GanConfig(epochs=cfg.gan.epochs, z_dim=cfg.gan.z_dim),
        policy=AugmentationPolicy(target=cfg.gan.policy,
                                  max_synthetic_fraction=cfg.gan.cap),
    )
    return train, test, prototypes, sim


def _write_metrics(result: SimulationResult, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / METRICS_FILENAME
    lines = []
    for report in result.reports:
        for record in report.to_records():
            lines.append(json.dumps(record, separators=(",", ":")))
    summary_record = {
        "round": result.summary["rounds_completed"],
        "entity": "server",
        "metric": "summary",
        "value": result.summary,
    }
    lines.append(json.dumps(summary_record, separators=(",", ":")))
    path.write_text("\n".join(lines) + "\n")
    return path


def run(cfg: RunConfig) -> int:
    """Execute a simulation and write the metrics stream; returns exit status."""
    try:
        train, test, prototypes, sim = build_simulation(cfg)
        result = run_simulation(train, test, prototypes, sim)
        path = _write_metrics(result, Path(cfg.out_path))
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - boundary: report module provenance
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    print(f"completed {result.summary['rounds_completed']} rounds; "
          f"final accuracy {result.summary['final_accuracy']:.4f}; metrics at {path}")
    return 0


def export_plot_data(metrics_path, out_dir) -> list[Path]:
    """Write one delimiter-separated table per curve from a metrics stream."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    text = Path(metrics_path).read_text()
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{metrics_path}:{i + 1}: malformed record: {exc}") from exc
        if not {"round", "entity", "metric", "value"} <= set(record):
            raise ValueError(f"{metrics_path}:{i + 1}: record missing required fields")
        records.append(record)

    rounds = sorted({r["round"] for r in records if r["metric"] != "summary"})
    by_key = {(r["round"], r["entity"], r["metric"]): r["value"] for r in records}
    client_ids = sorted({r["entity"] for r in records if isinstance(r["entity"], int)})

    acc_path = out / "server_accuracy.csv"
    with acc_path.open("w") as fh:
        fh.write("round,accuracy\n")
        for t in rounds:
            if (t, "server", "accuracy") in by_key:
                fh.write(f"{t},{by_key[(t, 'server', 'accuracy')]}\n")

    loss_path = out / "client_loss.csv"
    with loss_path.open("w") as fh:
        fh.write(",".join(["round"] + [f"client_{c}" for c in client_ids]) + "\n")
        for t in rounds:
            row = [str(t)]
            for c in client_ids:
                value = by_key.get((t, c, "train_loss"), "")
                row.append(str(value))
            fh.write(",".join(row) + "\n")

    bytes_path = out / "bytes.csv"
    with bytes_path.open("w") as fh:
        fh.write("round,bytes_up_total,bytes_down_total\n")
        for t in rounds:
            up = by_key.get((t, "server", "bytes_up_total"))
            down = by_key.get((t, "server", "bytes_down_total"))
            if up is not None and down is not None:
                fh.write(f"{t},{up},{down}\n")

    return [acc_path, loss_path, bytes_path]


def inspect_delta(path) -> int:
    """Decode a delta payload and print its layout."""
    data = Path(path).read_bytes()
    delta = qlora.decode_delta(data)
    print(f"{len(data)} bytes, rank {delta.rank}, {len(delta.names)} tensors")
    print(f"{'name':<10} {'rows':>6} {'cols':>6} {'rank':>5} {'numel':>8}  max|delta|")
    for name, rows, cols, rank in qlora.delta_entries(delta):
        numel = rows * rank + rank * cols if rank else rows * cols
        update = delta.dense_update(name)
        print(f"{name:<10} {rows:>6} {cols:>6} {rank:>5} {numel:>8}  {np.abs(update).max():.6g}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedadapt", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a simulation from a config file")
    p_run.add_argument("--config", required=True, help="JSON config file (empty file = defaults)")
    p_run.add_argument("--seed", type=int, help="override seed")
    p_run.add_argument("--rounds", type=int, help="override communication rounds")
    p_run.add_argument("--clients", type=int, help="override client count")
    p_run.add_argument("--bits", type=int, choices=(4, 8), help="override lora.bits")
    p_run.add_argument("--rank", type=int, help="override lora.rank")
    p_run.add_argument("--gan", choices=("on", "off"), help="override gan.enabled")
    p_run.add_argument("--dataset", help="toy or embeddings:<path>")
    p_run.add_argument("--out", help="override output directory")

    p_export = sub.add_parser("export-plots", help="emit per-curve tables from a metrics stream")
    p_export.add_argument("--in", dest="in_path", required=True, help="metrics.jsonl path")
    p_export.add_argument("--out", required=True, help="output directory")

    p_inspect = sub.add_parser("inspect-delta", help="decode and print a delta payload")
    p_inspect.add_argument("payload", help="payload file")
    return parser


def _run_overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.rounds is not None:
        overrides["rounds"] = args.rounds
    if args.clients is not None:
        overrides["n_clients"] = args.clients
    if args.bits is not None:
        overrides["lora.bits"] = args.bits
    if args.rank is not None:
        overrides["lora.rank"] = args.rank
    if args.gan is not None:
        overrides["gan.enabled"] = args.gan == "on"
    if args.dataset is not None:
        if args.dataset == "toy":
            overrides["dataset.kind"] = "toy"
        elif args.dataset.startswith("embeddings:"):
            overrides["dataset.kind"] = "embeddings"
            overrides["dataset.path"] = args.dataset.split(":", 1)[1]
        else:
            raise ConfigError(f"--dataset must be toy or embeddings:<path>, got {args.dataset!r}")
    if args.out is not None:
        overrides["out_path"] = args.out
    return overrides


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config, _run_overrides(args))
            return run(cfg)
        if args.command == "export-plots":
            paths = export_plot_data(args.in_path, args.out)
            print("\n".join(str(p) for p in paths))
            return 0
        if args.command == "inspect-delta":
            return inspect_delta(args.payload)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error [{type(exc).__module__}.{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
