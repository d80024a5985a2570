"""Experiment configuration, run grids, and sweep execution.

A config file is a YAML mapping with these top-level keys:

``stream``  generator name and its parameters (see :mod:`kifusion.tasks`)
``train``   :class:`~kifusion.trainer.TrainConfig` fields; ``policy`` is a
            nested mapping of :class:`~kifusion.fusion.FusionPolicy` fields
``seeds``   list of integer seeds
``orders``  ``default`` (three fixed orders), ``identity``, or explicit lists
``sweep``   optional ablation axes, used by ``ablate`` only
``workers`` number of worker processes for independent runs
``out``     output directory (``--out`` on the command line wins)
"""

from __future__ import annotations

import copy
import dataclasses
import itertools
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .fusion import FusionPolicy
from .metrics import RunReport, compare_runs, comparison_csv, format_comparison, write_report
from .tasks import TaskSequence, batches_per_epoch, default_orders, make_stream
from .trainer import TrainConfig, train_sequence

SWEEP_AXES = ("methods", "policies", "inner_steps", "keep_fraction", "alpha", "capacity_fraction")
SINGLE_FUSION = "n_prime"  # inner_steps value meaning one fusion per task
BUNDLE_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    """Unreadable or invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    stream: dict
    train: TrainConfig = TrainConfig()
    seeds: tuple[int, ...] = (0,)
    orders: tuple[tuple[int, ...], ...] = ()
    sweep: dict = field(default_factory=dict)
    workers: int = 1
    out: str | None = None

    @property
    def n_prime(self) -> int:
        """Inner-loop steps per task: epochs times batches per epoch."""
        return self.train.epochs * batches_per_epoch(int(self.stream.get("n_train", 1000)), self.train.batch_inner)

    def resolved_orders(self) -> list[tuple[str, list[int]]]:
        k = int(self.stream["num_tasks"])
        orders = [list(o) for o in self.orders] or [list(range(k))]
        return [(f"order{i + 1}", o) for i, o in enumerate(orders)]

    def to_dict(self) -> dict:
        return {
            "stream": dict(self.stream),
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "orders": [list(o) for o in self.orders],
            "sweep": copy.deepcopy(self.sweep),
            "workers": self.workers,
            "out": self.out,
        }


def _set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a mapping")
        node = child
    node[parts[-1]] = value


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``3e-4`` and ``1e4`` as floats (YAML 1.1 wants ``3.0e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$|^[-+]?[0-9][0-9_]*\.[0-9_]*$|^[-+]?\.[0-9_]+$"
               r"|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def parse_overrides(tokens: Sequence[str]) -> list[tuple[str, Any]]:
    """``["--train.method", "seq", "--seeds=[0,1]"]`` -> ``[(key, value), ...]``.

    Values are parsed as YAML scalars or flow collections, so ``0.01``,
    ``true`` and ``[1, 2]`` get their natural types.
    """
    out = []
    toks = list(tokens)
    i = 0
    while i < len(toks):
        tok = toks[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"expected --key value override, got {tok!r}")
        if "=" in tok:
            key, raw = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(toks):
                raise ConfigError(f"override {tok} has no value")
            key, raw = tok[2:], toks[i + 1]
            i += 2
        try:
            value = _load_yaml(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override --{key}: cannot parse {raw!r}: {exc}") from None
        out.append((key, value))
    return out


def _orders(raw, num_tasks: int) -> tuple[tuple[int, ...], ...]:
    if raw in (None, "identity"):
        return ()
    if raw == "default":
        return tuple(tuple(o) for o in default_orders(num_tasks))
    if isinstance(raw, list) and all(isinstance(o, list) for o in raw):
        return tuple(tuple(int(k) for k in o) for o in raw)
    raise ConfigError(f"orders must be 'default', 'identity' or a list of lists, got {raw!r}")


def build_config(tree: dict) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(tree) - {"stream", "train", "seeds", "orders", "sweep", "workers", "out"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    stream = tree.get("stream")
    if not isinstance(stream, dict) or "generator" not in stream or "num_tasks" not in stream:
        raise ConfigError("stream must be a mapping with at least 'generator' and 'num_tasks'")
    try:
        train = TrainConfig.from_dict(tree.get("train") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    seeds = tree.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError(f"seeds must be non-negative integers, got {seeds!r}")
    sweep = tree.get("sweep") or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep must be a mapping")
    bad = set(sweep) - set(SWEEP_AXES)
    if bad:
        raise ConfigError(f"unknown sweep axes {sorted(bad)}; expected some of {SWEEP_AXES}")
    for axis, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{axis} must be a non-empty list")
    workers = tree.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer")
    return ExperimentConfig(
        stream=dict(stream), train=train, seeds=tuple(seeds),
        orders=_orders(tree.get("orders"), int(stream["num_tasks"])),
        sweep=sweep, workers=workers, out=tree.get("out"),
    )


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in BUNDLE_DIR.glob("*.yaml"))


def resolve_config_path(name) -> Path:
    """A file path, or the name of a bundled config such as ``paper-desk``."""
    path = Path(name)
    if not path.exists() and path.suffix == "" and (BUNDLE_DIR / f"{name}.yaml").exists():
        return BUNDLE_DIR / f"{name}.yaml"
    return path


def load_config(path, overrides: Sequence[tuple[str, Any]] = ()) -> ExperimentConfig:
    path = resolve_config_path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        tree = _load_yaml(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    for key, value in overrides:
        _set_dotted(tree, key, value)
    return build_config(tree)


@dataclass(frozen=True)
class RunSpec:
    label: str
    train: TrainConfig
    seed: int
    order_id: str
    order: tuple[int, ...]


def run_grid(exp: ExperimentConfig) -> list[RunSpec]:
    return [RunSpec(exp.train.label(), exp.train, s, oid, tuple(o))
            for oid, o in exp.resolved_orders() for s in exp.seeds]


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    return dataclasses.replace(cfg, **changes)


def sweep_configs(exp: ExperimentConfig) -> list[tuple[str, TrainConfig]]:
    """Cartesian product of the sweep axes, as ``(label, config)`` pairs.

    ``methods`` and ``policies`` together form the method axis: each method
    with its configured policy, then ``kif`` under every listed policy.  A
    ``inner_steps`` entry of ``n_prime`` means one fusion per task.  The
    number of inner steps per task stays fixed whatever ``Q`` is.
    """
    sw = exp.sweep
    base = exp.train
    methods = [(m, base.policy.variant) for m in sw.get("methods", [base.method])]
    methods += [("kif", v) for v in sw.get("policies", [])]
    axes = [(a, sw[a]) for a in ("inner_steps", "keep_fraction", "alpha", "capacity_fraction") if a in sw]
    short = {"inner_steps": "Q", "keep_fraction": "keep", "alpha": "alpha", "capacity_fraction": "mem"}
    out, seen = [], set()
    for (method, variant), combo in itertools.product(methods, itertools.product(*(v for _, v in axes))):
        try:
            cfg = _with(base, method=method, policy=dataclasses.replace(base.policy, variant=variant))
            parts = []
            for (axis, values), value in zip(axes, combo):
                if axis == "inner_steps":
                    q = exp.n_prime if value == SINGLE_FUSION else int(value)
                    cfg = _with(cfg, inner_steps=q)
                elif axis == "keep_fraction":
                    cfg = _with(cfg, policy=dataclasses.replace(cfg.policy, keep_fraction=float(value)))
                elif axis == "alpha":
                    cfg = _with(cfg, alpha1=float(value), alpha2=float(value))
                else:
                    cfg = _with(cfg, capacity_fraction=float(value))
                if len(values) > 1:
                    parts.append(f"{short[axis]}={value}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sweep: {exc}") from None
        label = " ".join([cfg.label(), *parts])
        if label not in seen:
            seen.add(label)
            out.append((label, cfg))
    return out


def ablation_grid(exp: ExperimentConfig) -> list[RunSpec]:
    return [RunSpec(label, cfg, s, oid, tuple(o))
            for label, cfg in sweep_configs(exp)
            for oid, o in exp.resolved_orders() for s in exp.seeds]


def build_stream(exp: ExperimentConfig, spec: RunSpec) -> TaskSequence:
    try:
        return make_stream(exp.stream, spec.seed, list(spec.order), spec.order_id)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stream: {exc}") from None


def report_name(spec: RunSpec) -> str:
    slug = re.sub(r"[^A-Za-z0-9.=-]+", "_", spec.label).strip("_")
    return f"{slug}__{spec.order_id}__seed{spec.seed}.json"


def execute(exp: ExperimentConfig, spec: RunSpec, out_dir: Path | None = None, mask_dir: Path | None = None) -> RunReport:
    """Train one run; with ``out_dir`` also write its report there.

    ``mask_dir`` receives per-cycle mask CSVs in a subdirectory named after the report.
    """
    dump = None if mask_dir is None else Path(mask_dir) / Path(report_name(spec)).stem
    report = train_sequence(build_stream(exp, spec), spec.train, spec.seed, label=spec.label, mask_dump_dir=dump)
    if out_dir is not None:
        write_report(report, Path(out_dir) / report_name(spec))
    return report


def reproduce(report: RunReport, **kw) -> RunReport:
    """Retrain a run from nothing but the config, stream and seed embedded in ``report``."""
    seq = make_stream(report.stream, report.seed, report.order or None, report.order_id)
    return train_sequence(seq, TrainConfig.from_dict(report.config), report.seed, label=report.label, **kw)


def _execute_packed(args) -> RunReport:
    return execute(*args)


def execute_all(exp: ExperimentConfig, specs: Sequence[RunSpec], out_dir: Path | None = None,
                mask_dir: Path | None = None) -> list[RunReport]:
    """Run ``specs``, in worker processes when ``exp.workers > 1``; order is kept."""
    for spec in specs:  # surface stream errors before any training starts
        build_stream(exp, spec)
    jobs = [(exp, s, out_dir, mask_dir) for s in specs]
    if exp.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(exp.workers) as pool:
            return list(pool.map(_execute_packed, jobs))
    return [_execute_packed(j) for j in jobs]


def write_comparison(reports: Sequence[RunReport], out_dir: Path) -> str:
    rows = compare_runs(reports)
    table = format_comparison(rows)
    (out_dir / "comparison.txt").write_text(table + "\n")
    (out_dir / "comparison.csv").write_text(comparison_csv(rows))
    return table


def write_resolved(exp: ExperimentConfig, out_dir: Path) -> None:
    (out_dir / "config.resolved.yaml").write_text(yaml.safe_dump(exp.to_dict(), sort_keys=False))
