import json
import re

import numpy as np
import pytest

from frap.harness import (
    ABLATION_VARIANTS,
    AGGREGATE_MARKER,
    CSV_COLUMNS,
    ConfigError,
    ExperimentConfig,
    ReportError,
    ablate,
    experiment_from_dict,
    format_table,
    load_experiment,
    parse_summary_csv,
    report,
    rows_to_csv,
    run_batch,
)
from frap.loop import LoopConfig, RunRecord
from frap.objective import ObjectiveConfig
from frap.prompts import PromptSpec, expand_template

VOCAB = {"colors": ["red", "green"], "objects": ["apple", "chair"]}
PROMPTS = expand_template("color-object", VOCAB)[:2]


def make_config(tmp_path, **kwargs):
    defaults = dict(
        prompts=PROMPTS,
        seeds=[0, 1, 2],
        loop=LoopConfig(),
        objective=ObjectiveConfig(),
        out_dir=tmp_path / "runs",
        workers=1,
    )
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


def strip_wall_ms(csv_text: str) -> str:
    return re.sub(r"[^,\n]*$", "", csv_text, flags=re.M)


class TestRunBatch:
    def test_counts_and_files(self, tmp_path):
        summary = run_batch(make_config(tmp_path))
        assert len(summary.rows) == 6
        assert summary.ok
        json_files = sorted(p.name for p in summary.out_dir.glob("*.json"))
        assert len(json_files) == 6
        assert len(list(summary.out_dir.glob("*.ppm"))) == 6
        assert summary.csv_path.exists()

    def test_rerun_byte_identical_excluding_wall_ms(self, tmp_path):
        a = run_batch(make_config(tmp_path, out_dir=tmp_path / "a"))
        b = run_batch(make_config(tmp_path, out_dir=tmp_path / "b"))
        assert strip_wall_ms(a.csv_path.read_text()) == strip_wall_ms(b.csv_path.read_text())

    def test_worker_counts_agree_post_sort(self, tmp_path):
        a = run_batch(make_config(tmp_path, out_dir=tmp_path / "w1", workers=1))
        b = run_batch(make_config(tmp_path, out_dir=tmp_path / "w8", workers=8))
        assert strip_wall_ms(a.csv_path.read_text()) == strip_wall_ms(b.csv_path.read_text())
        for path_a in sorted((tmp_path / "w1").glob("*.json")):
            da = json.loads(path_a.read_text())
            db = json.loads((tmp_path / "w8" / path_a.name).read_text())
            da.pop("wall_ms"), db.pop("wall_ms")
            assert da == db

    def test_rows_sorted_canonically(self, tmp_path):
        summary = run_batch(make_config(tmp_path, workers=4))
        keys = [(r["prompt_id"], r["seed"], r["variant"]) for r in summary.rows]
        assert keys == sorted(keys)

    def test_failures_recorded_and_batch_continues(self, tmp_path):
        broken = PromptSpec(
            text="empty",
            tokens=("<sot>", "word", "<eot>"),
            object_indices=(),
            modifier_pairs=(),
            frozen_mask=(True, False, True),
        )
        summary = run_batch(make_config(tmp_path, prompts=[broken, PROMPTS[0]], seeds=[0]))
        assert len(summary.failures) == 1
        assert len(summary.rows) == 1
        assert not summary.ok
        assert (summary.out_dir / "failures.json").exists()

    def test_record_files_round_trip(self, tmp_path):
        summary = run_batch(make_config(tmp_path, seeds=[0]))
        for path in summary.out_dir.glob("*.json"):
            data = json.loads(path.read_text())
            assert RunRecord.from_dict(data).to_dict() == data

    def test_aggregate_means_match_independent_summation(self, tmp_path):
        summary = run_batch(make_config(tmp_path))
        assert len(summary.aggregates) == 1
        agg = summary.aggregates[0]
        assert agg["prompt_id"] == AGGREGATE_MARKER
        for col in ("final_total", "proxy_presence_mean", "call_count", "wall_ms"):
            independent = float(np.mean([r[col] for r in summary.rows]))
            assert abs(agg[col] - independent) < 1e-9


class TestCsvRoundTrip:
    def test_parse_inverts_write(self, tmp_path):
        summary = run_batch(make_config(tmp_path, seeds=[0, 1]), write_files=False)
        text = rows_to_csv(summary.rows, summary.aggregates)
        rows, aggregates = parse_summary_csv(text)
        assert rows == summary.rows
        assert aggregates == summary.aggregates

    def test_header_only_is_valid(self):
        rows, aggregates = parse_summary_csv(",".join(CSV_COLUMNS) + "\n")
        assert rows == [] and aggregates == []

    def test_malformed_line_reported_with_number(self):
        text = ",".join(CSV_COLUMNS) + "\nonly,three,fields\n"
        with pytest.raises(ReportError) as err:
            parse_summary_csv(text)
        assert err.value.line == 2

    def test_bad_header_rejected(self):
        with pytest.raises(ReportError):
            parse_summary_csv("nope\n1\n")


class TestAblate:
    def test_rows_and_call_counts(self, tmp_path):
        cfg = make_config(tmp_path, prompts=PROMPTS[:1], seeds=[0])
        result = ablate(cfg, ["default", "redo_timestep", "vanilla"], write_files=False)
        by_variant = {r["variant"]: r for r in result.rows}
        assert by_variant["default"]["call_count"] == 65
        assert by_variant["redo_timestep"]["call_count"] == 90
        assert by_variant["vanilla"]["call_count"] == 50

    def test_t_end_41_records_ten_steps(self, tmp_path):
        cfg = make_config(tmp_path, prompts=PROMPTS[:1], seeds=[0])
        ablate(cfg, ["t_end=41"], write_files=True)
        record_files = list((cfg.out_dir / "t_end-41").glob("*.json"))
        assert record_files
        record = RunRecord.from_dict(json.loads(record_files[0].read_text()))
        assert len(record.steps) == 10

    def test_no_binding_runs_with_binding_disabled(self, tmp_path):
        cfg = make_config(tmp_path, prompts=PROMPTS[:1], seeds=[0])
        result = ablate(cfg, ["no_binding"], write_files=False)
        assert result.rows[0]["final_binding"] == 0.0

    def test_unknown_variant_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            ablate(make_config(tmp_path), ["default", "mystery"], write_files=False)

    def test_full_variant_list_is_complete(self):
        assert set(ABLATION_VARIANTS) == {
            "default", "no_binding", "no_presence", "max_presence", "tv", "jsd",
            "kld", "static_weighting", "vanilla", "redo_timestep",
            "t_end=41", "t_end=1", "no_selection",
        }


class TestReport:
    def test_renders_table(self, tmp_path):
        summary = run_batch(make_config(tmp_path, seeds=[0]))
        table = report(summary.csv_path)
        lines = table.splitlines()
        assert lines[0].startswith("prompt_id")
        assert len(lines) == 1 + len(summary.rows) + len(summary.aggregates)

    def test_trajectories_have_one_row_per_weighting_step(self, tmp_path):
        summary = run_batch(make_config(tmp_path, prompts=PROMPTS[:1], seeds=[0]))
        out = tmp_path / "traj"
        report(summary.csv_path, trajectories_dir=out)
        files = list(out.glob("*_trajectory.csv"))
        assert len(files) == 1
        lines = files[0].read_text().splitlines()
        assert lines[0] == "step,total,presence,binding,mean_phi_objects"
        assert len(lines) == 1 + 25

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(ReportError):
            report(tmp_path / "absent.csv")

    def test_format_table_empty_rows(self):
        table = format_table([], ["a", "b"])
        assert table == "a  b"


class TestExperimentConfig:
    def test_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            make_config(tmp_path, seeds=[])
        with pytest.raises(ConfigError):
            make_config(tmp_path, prompts=[])
        with pytest.raises(ConfigError):
            make_config(tmp_path, workers=0)

    def test_load_from_file_with_template(self, tmp_path):
        (tmp_path / "vocab.json").write_text(json.dumps(VOCAB))
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "dataset": {"template": "color-object", "vocab": "vocab.json"},
                    "seeds": [3],
                    "loop": {"t_end": 41},
                    "objective": {"lam": 0.5},
                    "out_dir": "results",
                    "workers": 2,
                }
            )
        )
        cfg = load_experiment(cfg_path)
        assert len(cfg.prompts) == 4
        assert cfg.loop.t_end == 41
        assert cfg.objective.lam == 0.5
        assert cfg.out_dir == tmp_path / "results"

    def test_unreadable_vocab_fails_before_any_run(self, tmp_path):
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "dataset": {"template": "color-object", "vocab": "missing.json"},
                    "seeds": [0],
                }
            )
        )
        with pytest.raises(ConfigError):
            load_experiment(cfg_path)

    def test_inline_prompts(self):
        cfg = experiment_from_dict(
            {
                "dataset": {"prompts_inline": [p.to_dict() for p in PROMPTS]},
                "seeds": [0],
            }
        )
        assert cfg.prompts == PROMPTS
