"""Batch execution, ablation sweeps, and CSV reporting.

Runs are independent, so a batch executes on a thread pool and gathers
results through a single writer; output rows are sorted by (prompt id, seed,
variant) before anything touches disk, which makes the CSV byte-identical
across worker counts and re-runs (wall-clock columns aside).

Metric columns are prefixed ``proxy_``: they are in-model diagnostics (peaks
of smoothed attention maps, distribution overlaps), not external perceptual
scores.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .denoiser import ToyDenoiser, ToyTextEncoder
from .loop import LoopConfig, RunRecord, run, write_ppm
from .objective import ObjectiveConfig
from .prompts import PromptSpec, PromptError, expand_template, load_vocabulary


class ConfigError(ValueError):
    """Raised for unreadable or inconsistent experiment configurations."""


class ReportError(ValueError):
    """Raised for malformed summary CSV input; carries the offending line."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


CSV_COLUMNS = (
    "prompt_id",
    "seed",
    "variant",
    "final_total",
    "final_presence",
    "final_binding",
    "proxy_presence_mean",
    "proxy_presence_min",
    "proxy_binding_mean",
    "call_count",
    "wall_ms",
)

AGGREGATE_MARKER = "(mean)"

ABLATION_VARIANTS = (
    "default",
    "no_binding",
    "no_presence",
    "max_presence",
    "tv",
    "jsd",
    "kld",
    "static_weighting",
    "vanilla",
    "redo_timestep",
    "t_end=41",
    "t_end=1",
    "no_selection",
)

_ABLATION_OVERRIDES: dict[str, tuple[dict, dict]] = {
    "default": ({}, {}),
    "no_binding": ({}, {"binding_variant": "none"}),
    "no_presence": ({}, {"presence_variant": "none"}),
    "max_presence": ({}, {"presence_variant": "max_only"}),
    "tv": ({}, {"presence_variant": "total_variation"}),
    "jsd": ({}, {"binding_variant": "jsd"}),
    "kld": ({}, {"binding_variant": "kld"}),
    "static_weighting": ({"variant": "static_weighting"}, {}),
    "vanilla": ({"variant": "vanilla", "select": False}, {}),
    "redo_timestep": ({"variant": "redo_timestep"}, {}),
    "t_end=41": ({"t_end": 41}, {}),
    "t_end=1": ({"t_end": 1}, {}),
    "no_selection": ({"select": False}, {}),
}


@dataclass
class ExperimentConfig:
    prompts: list[PromptSpec]
    seeds: list[int]
    loop: LoopConfig
    objective: ObjectiveConfig
    out_dir: Path
    workers: int = 1
    denoiser_seed: int = 1234
    encoder_seed: int = 1234

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.prompts:
            raise ConfigError("the dataset resolved to zero prompts")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        self.out_dir = Path(self.out_dir)


def load_prompts_file(path) -> list[PromptSpec]:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read prompts file {path}: {exc}") from exc
    try:
        return [PromptSpec.from_dict(d) for d in data]
    except (KeyError, TypeError, PromptError) as exc:
        raise ConfigError(f"malformed prompt entry in {path}: {exc}") from exc


def resolve_dataset(dataset: dict) -> list[PromptSpec]:
    """Dataset source: inline prompt dicts, a prompts file, or a template."""
    if "prompts_inline" in dataset:
        try:
            return [PromptSpec.from_dict(d) for d in dataset["prompts_inline"]]
        except (KeyError, TypeError, PromptError) as exc:
            raise ConfigError(f"malformed inline prompt: {exc}") from exc
    if "prompts" in dataset:
        return load_prompts_file(dataset["prompts"])
    if "template" in dataset:
        try:
            vocab = load_vocabulary(dataset["vocab"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ConfigError(f"cannot read vocabulary: {exc}") from exc
        try:
            return expand_template(dataset["template"], vocab, dataset.get("seed", 0))
        except PromptError as exc:
            raise ConfigError(str(exc)) from exc
    raise ConfigError(
        "dataset needs 'prompts_inline', a 'prompts' file, or a 'template' + 'vocab'"
    )


def experiment_from_dict(cfg: dict, base_dir: Path | None = None) -> ExperimentConfig:
    base = Path(base_dir) if base_dir is not None else Path(".")

    def resolve_path(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    dataset = dict(cfg.get("dataset") or {})
    for key in ("prompts", "vocab"):
        if key in dataset:
            dataset[key] = resolve_path(dataset[key])
    try:
        loop = LoopConfig.from_dict(cfg.get("loop") or {})
        objective = ObjectiveConfig.from_dict(cfg.get("objective") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad loop/objective config: {exc}") from exc
    return ExperimentConfig(
        prompts=resolve_dataset(dataset),
        seeds=list(cfg.get("seeds") or []),
        loop=loop,
        objective=objective,
        out_dir=resolve_path(cfg.get("out_dir", "runs")),
        workers=int(cfg.get("workers", 1)),
        denoiser_seed=int(cfg.get("denoiser_seed", 1234)),
        encoder_seed=int(cfg.get("encoder_seed", 1234)),
    )


def load_experiment(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
    return experiment_from_dict(cfg, Path(path).parent)


def run_id_for(record: RunRecord) -> str:
    return f"{record.prompt_id}__s{record.seed}__{record.variant}"


def _summary_row(record: RunRecord) -> dict:
    presence = [v for _, v in record.proxy["presence"]]
    binding = [v for _, _, v in record.proxy["binding"]]
    last = record.steps[-1]
    return {
        "prompt_id": record.prompt_id,
        "seed": record.seed,
        "variant": record.variant,
        "final_total": last.total,
        "final_presence": last.presence,
        "final_binding": last.binding,
        "proxy_presence_mean": sum(presence) / len(presence),
        "proxy_presence_min": min(presence),
        "proxy_binding_mean": sum(binding) / len(binding) if binding else 0.0,
        "call_count": record.call_count,
        "wall_ms": record.wall_ms,
    }


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _aggregate_rows(rows: list[dict]) -> list[dict]:
    """One mean row per variant over the numeric columns."""
    by_variant: dict[str, list[dict]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row)
    out = []
    numeric = [c for c in CSV_COLUMNS if c not in ("prompt_id", "seed", "variant")]
    for variant in sorted(by_variant):
        group = by_variant[variant]
        agg = {"prompt_id": AGGREGATE_MARKER, "seed": "", "variant": variant}
        for col in numeric:
            total = 0.0
            for row in group:
                total += row[col]
            agg[col] = total / len(group)
        out.append(agg)
    return out


def rows_to_csv(rows: list[dict], aggregates: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows + aggregates:
        writer.writerow([_format_cell(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


@dataclass
class BatchSummary:
    out_dir: Path
    csv_path: Path
    rows: list[dict]
    aggregates: list[dict]
    failures: list[dict]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "out_dir": str(self.out_dir),
            "csv_path": str(self.csv_path),
            "rows": self.rows,
            "aggregates": self.aggregates,
            "failures": self.failures,
        }


def run_batch(config: ExperimentConfig, write_files: bool = True) -> BatchSummary:
    """Execute every prompt x seed run; write one record file each plus a
    summary CSV with per-variant mean rows. Failed runs are recorded and do
    not stop the batch."""
    denoiser = ToyDenoiser(seed=config.denoiser_seed)
    encoder = ToyTextEncoder(seed=config.encoder_seed)

    tasks = [(prompt, seed) for prompt in config.prompts for seed in config.seeds]

    def execute(task):
        prompt, seed = task
        loop_cfg = dataclasses.replace(config.loop, seed=seed)
        try:
            record = run(denoiser, encoder, prompt, config.objective, loop_cfg)
            return record, None
        except Exception as exc:  # recorded, batch continues
            return None, {
                "prompt_id": prompt.text,
                "seed": seed,
                "error": f"{type(exc).__name__}: {exc}",
            }

    if config.workers == 1:
        outcomes = [execute(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(execute, tasks))

    records = [r for r, _ in outcomes if r is not None]
    failures = [f for _, f in outcomes if f is not None]
    records.sort(key=lambda r: (r.prompt_id, r.seed, r.variant))
    failures.sort(key=lambda f: (f["prompt_id"], f["seed"]))

    rows = [_summary_row(r) for r in records]
    aggregates = _aggregate_rows(rows)

    out_dir = Path(config.out_dir)
    csv_path = out_dir / "summary.csv"
    if write_files:
        out_dir.mkdir(parents=True, exist_ok=True)
        for record in records:
            rid = run_id_for(record)
            with open(out_dir / f"{rid}.json", "w", encoding="utf-8") as fh:
                json.dump(record.to_dict(), fh)
            write_ppm(out_dir / f"{rid}.ppm", record.image)
        csv_path.write_text(rows_to_csv(rows, aggregates), encoding="utf-8")
        if failures:
            with open(out_dir / "failures.json", "w", encoding="utf-8") as fh:
                json.dump(failures, fh, indent=2)

    return BatchSummary(out_dir, csv_path, rows, aggregates, failures)


@dataclass
class AblationResult:
    rows: list[dict]  # one per variant, in request order
    summaries: dict[str, BatchSummary]

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def ablation_configs(
    base_loop: LoopConfig, base_objective: ObjectiveConfig, variant: str
) -> tuple[LoopConfig, ObjectiveConfig]:
    if variant not in _ABLATION_OVERRIDES:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    loop_over, obj_over = _ABLATION_OVERRIDES[variant]
    loop = dataclasses.replace(base_loop, **loop_over)
    objective = (
        ObjectiveConfig.from_dict({**base_objective.to_dict(), **obj_over})
        if obj_over
        else base_objective
    )
    return loop, objective


def ablate(
    config: ExperimentConfig, variants: list[str], write_files: bool = True
) -> AblationResult:
    """Run each ablation variant over the same prompts and seeds; emit one
    comparison row per variant."""
    for v in variants:
        if v not in _ABLATION_OVERRIDES:
            raise ConfigError(f"unknown ablation variant {v!r}")

    rows = []
    summaries = {}
    for variant in variants:
        loop, objective = ablation_configs(config.loop, config.objective, variant)
        sub = dataclasses.replace(
            config,
            loop=loop,
            objective=objective,
            out_dir=Path(config.out_dir) / variant.replace("=", "-"),
        )
        summary = run_batch(sub, write_files=write_files)
        summaries[variant] = summary
        mean_cols = {
            c: (sum(r[c] for r in summary.rows) / len(summary.rows) if summary.rows else 0.0)
            for c in CSV_COLUMNS
            if c not in ("prompt_id", "seed", "variant")
        }
        rows.append(
            {
                "variant": variant,
                "runs": len(summary.rows),
                "failures": len(summary.failures),
                **mean_cols,
            }
        )

    if write_files:
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["variant", "runs", "failures"] + [
            c for c in CSV_COLUMNS if c not in ("prompt_id", "seed", "variant")
        ]
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in header])
        (out_dir / "ablation.csv").write_text(buf.getvalue(), encoding="utf-8")
    return AblationResult(rows, summaries)


def parse_summary_csv(text: str) -> tuple[list[dict], list[dict]]:
    """Parse a summary CSV back into data and aggregate rows."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError("empty file", 1) from None
    if tuple(header) != CSV_COLUMNS:
        raise ReportError(f"unexpected header {header}", 1)
    rows, aggregates = [], []
    for lineno, raw in enumerate(reader, start=2):
        if not raw:
            continue
        if len(raw) != len(CSV_COLUMNS):
            raise ReportError(f"expected {len(CSV_COLUMNS)} fields, got {len(raw)}", lineno)
        row: dict = dict(zip(CSV_COLUMNS, raw))
        try:
            for col in CSV_COLUMNS[3:]:
                row[col] = _parse_number(row[col])
            if row["prompt_id"] == AGGREGATE_MARKER:
                aggregates.append(row)
            else:
                row["seed"] = int(row["seed"])
                rows.append(row)
        except ValueError as exc:
            raise ReportError(str(exc), lineno) from exc
    return rows, aggregates


def _parse_number(s: str):
    """Restore the exact numeric type the writer used: bare digits were an
    int, anything else a repr'd float."""
    try:
        return int(s)
    except ValueError:
        return float(s)


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned text table; floats shortened for reading, not for parsing."""
    def display(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[display(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)).rstrip()]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def report(csv_path, trajectories_dir=None) -> str:
    """Render a summary CSV as an aligned table; optionally dump per-run
    loss trajectories (one CSV per run) read from the record files."""
    csv_path = Path(csv_path)
    try:
        text = csv_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot read {csv_path}: {exc}", 0) from exc
    rows, aggregates = parse_summary_csv(text)
    table = format_table(rows + aggregates, list(CSV_COLUMNS))

    if trajectories_dir is not None:
        trajectories_dir = Path(trajectories_dir)
        trajectories_dir.mkdir(parents=True, exist_ok=True)
        for row in rows:
            rid = f"{row['prompt_id']}__s{row['seed']}__{row['variant']}"
            record_path = csv_path.parent / f"{rid}.json"
            with open(record_path, encoding="utf-8") as fh:
                record = RunRecord.from_dict(json.load(fh))
            write_trajectory_csv(trajectories_dir / f"{rid}_trajectory.csv", record)
    return table


def write_trajectory_csv(path, record: RunRecord) -> None:
    objects = _object_positions(record)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "total", "presence", "binding", "mean_phi_objects"])
    for step in record.steps:
        mean_phi = sum(step.phi[s] for s in objects) / len(objects)
        writer.writerow(
            [step.t, repr(step.total), repr(step.presence), repr(step.binding), repr(mean_phi)]
        )
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _object_positions(record: RunRecord) -> list[int]:
    return [int(s) for s, _ in record.proxy["presence"]]
