"""Report rendering: tables, series files, figures."""

import json

from genrec.metrics import MetricsReport
from genrec.report import (
    plot_depth_sweep,
    plot_metric_bars,
    plot_training_curve,
    write_series,
    write_table,
)


def reports():
    return [
        MetricsReport({5: 0.5, 10: 0.7}, {5: 0.3, 10: 0.4}, 40,
                      flags={"variant": "unit", "gct": False, "aat": False, "seed": 0}),
        MetricsReport({5: 0.2, 10: 0.35}, {5: 0.1, 10: 0.2}, 40,
                      flags={"variant": "random", "gct": False, "aat": False, "seed": 0}),
    ]


class TestTables:
    def test_table_header_and_columns(self, tmp_path):
        p = write_table(reports(), tmp_path / "t.tsv", fingerprint="fp42")
        lines = p.read_text().splitlines()
        assert lines[0] == "#genrec-table v1 config=fp42"
        cols = lines[1].split("\t")
        assert "recall@10" in cols and "variant" in cols
        assert len(lines) == 2 + 2
        row = dict(zip(cols, lines[2].split("\t")))
        assert row["recall@10"] == "0.700000"

    def test_series_long_form(self, tmp_path):
        p = write_series(reports(), tmp_path / "s.tsv")
        lines = p.read_text().splitlines()
        assert lines[1] == "label\tmetric\tvalue"
        body = [l.split("\t") for l in lines[2:]]
        assert ["unit/s0", "recall@5", "0.500000"] in body
        assert ["random/s0", "ndcg@10", "0.200000"] in body

    def test_deterministic_bytes(self, tmp_path):
        p1 = write_table(reports(), tmp_path / "a.tsv", "fp")
        p2 = write_table(reports(), tmp_path / "b.tsv", "fp")
        assert p1.read_bytes() == p2.read_bytes()


class TestFigures:
    def test_metric_bars_written(self, tmp_path):
        p = plot_metric_bars(reports(), tmp_path / "bars.png", k=10)
        assert p.stat().st_size > 1000

    def test_depth_sweep_written(self, tmp_path):
        reps = [
            MetricsReport({10: 0.4 + 0.1 * d}, {10: 0.3}, 10,
                          flags={"depth_s": d, "depth_b": d, "seed": 0})
            for d in (1, 2, 4)
        ]
        p = plot_depth_sweep(reps, tmp_path / "sweep.png")
        assert p.stat().st_size > 1000

    def test_training_curve_from_log(self, tmp_path):
        log = tmp_path / "metrics.jsonl"
        recs = [
            {"stage": "initial", "epoch": 0, "step": s, "loss": 3.0 / (s + 1),
             "l_gen": 2.0, "l_con_s": 0.5, "l_con_b": 0.5}
            for s in range(5)
        ] + [{"stage": "initial", "epoch": 0, "valid_recall@10": 0.5}]
        log.write_text("\n".join(json.dumps(r) for r in recs))
        p = plot_training_curve(log, tmp_path / "curve.png")
        assert p.stat().st_size > 1000
