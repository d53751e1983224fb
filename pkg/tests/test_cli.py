"""CLI surface: stage wiring, artifact headers, isolation, error records."""

import json
from pathlib import Path

import pytest

from genrec.cli import main

TINY_INI = """
[pipeline]
seed = 0

[synth]
pattern = chain
n_items = 30
n_users = 40
seq_len = 7

[index]
k = 4
depth_s = 2
depth_b = 2

[model]
d_model = 32
n_layers = 1
n_heads = 2
context_len = 256
adapter_rank = 2

[train]
epochs = 1
anneal_epochs = 1
valid_users = 4
valid_beam = 10
min_anneal_history = 2

[behavior]
epochs = 2

[eval]
beam_size = 10

[ablate]
d_model = 32
n_layers = 1
n_heads = 2
adapter_rank = 2
epochs = 1
anneal_epochs = 1
seeds = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwd")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY_INI)
    wd = root / "wd"
    for cmd in ("synth", "ingest", "embed", "index", "train-initial", "train-anneal"):
        code = main([cmd, "--workdir", str(wd), "--config", str(cfg)])
        assert code == 0, cmd
    return wd, cfg


def run_ok(argv, capsys):
    code = main(argv)
    out = capsys.readouterr().out
    assert code == 0
    return json.loads(out)


class TestCommands:
    def test_recommend_output_contract(self, workdir, capsys):
        wd, cfg = workdir
        summary = run_ok(
            ["recommend", "--workdir", str(wd), "--config", str(cfg),
             "--user", "u0003", "--k", "10"],
            capsys,
        )
        assert len(summary["items"]) == 10
        rec_file = Path(summary["file"])
        lines = rec_file.read_text().splitlines()
        assert lines[0].startswith("#genrec-recs v1 config=")
        assert lines[1] == "user_id\trank\titem_id\tlog_prob"
        assert len(lines) == 2 + 10
        first = lines[2].split("\t")
        assert first[0] == "u0003" and first[1] == "1"
        float(first[3])

    def test_evaluate_twice_byte_identical(self, workdir, capsys):
        wd, cfg = workdir
        s1 = run_ok(["evaluate", "--workdir", str(wd), "--config", str(cfg)], capsys)
        table1 = Path(s1["table"]).read_bytes()
        series1 = Path(s1["series"]).read_bytes()
        s2 = run_ok(["evaluate", "--workdir", str(wd), "--config", str(cfg)], capsys)
        assert Path(s2["table"]).read_bytes() == table1
        assert Path(s2["series"]).read_bytes() == series1

    def test_reports_have_version_headers(self, workdir):
        wd, _ = workdir
        table = wd / "reports" / "metrics_annealed.tsv"
        assert table.read_text().splitlines()[0].startswith("#genrec-table v1 config=")

    def test_figures_rendered_alongside_tables(self, workdir):
        wd, _ = workdir
        assert (wd / "reports" / "metrics_annealed.png").stat().st_size > 0
        assert (wd / "reports" / "training_initial.png").stat().st_size > 0

    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        code = main(["embed", "--workdir", str(tmp_path / "fresh")])
        err = capsys.readouterr().err
        assert code == 2
        record = json.loads(err)
        assert record["command"] == "embed"
        assert "genrec ingest" in record["detail"]

    def test_error_records_are_single_line_json(self, tmp_path, capsys):
        code = main(["recommend", "--workdir", str(tmp_path / "nope"),
                     "--user", "u0", "--k", "3"])
        err = capsys.readouterr().err
        assert code == 2
        assert len(err.strip().splitlines()) == 1
        json.loads(err)

    def test_lock_file_guards_workdir(self, workdir, capsys):
        wd, cfg = workdir
        lock = wd / ".lock"
        lock.write_text("12345")
        try:
            code = main(["evaluate", "--workdir", str(wd), "--config", str(cfg)])
            err = capsys.readouterr().err
            assert code == 2
            assert "lock" in json.loads(err)["detail"]
        finally:
            lock.unlink()

    def test_unknown_user_rejected(self, workdir, capsys):
        wd, cfg = workdir
        code = main(["recommend", "--workdir", str(wd), "--config", str(cfg),
                     "--user", "ghost", "--k", "3"])
        assert code == 2
        assert "ghost" in capsys.readouterr().err


class TestStageIsolation:
    def test_rerun_stage_overwrites_only_its_outputs(self, workdir, capsys):
        wd, cfg = workdir
        corpus_bytes = (wd / "corpus" / "splits.jsonl").read_bytes()
        emb_bytes = (wd / "embeddings" / "semantic.bin").read_bytes()
        run_ok(["index", "--workdir", str(wd), "--config", str(cfg)], capsys)
        assert (wd / "corpus" / "splits.jsonl").read_bytes() == corpus_bytes
        assert (wd / "embeddings" / "semantic.bin").read_bytes() == emb_bytes

    def test_deleting_downstream_keeps_upstream_valid(self, workdir, capsys):
        wd, cfg = workdir
        (wd / "checkpoints" / "annealed.ckpt").unlink()
        # Upstream artifacts untouched; the stage can be reproduced.
        run_ok(["train-anneal", "--workdir", str(wd), "--config", str(cfg)], capsys)
        assert (wd / "checkpoints" / "annealed.ckpt").exists()

    def test_artifact_headers_carry_fingerprint(self, workdir):
        wd, _ = workdir
        for rel in ("corpus/splits.jsonl", "index/items.jsonl"):
            header = (wd / rel).read_text().splitlines()[0]
            assert " config=" in header


class TestAblateCommand:
    def test_depth_plan_writes_table_series_figure(self, workdir, capsys):
        wd, cfg = workdir
        summary = run_ok(
            ["ablate", "--workdir", str(wd), "--config", str(cfg),
             "--plan", "depths"],
            capsys,
        )
        assert summary["runs"] == 3
        table = Path(summary["table"])
        lines = table.read_text().splitlines()
        assert lines[0].startswith("#genrec-table v1")
        assert len(lines) == 2 + 3
        assert Path(summary["figure"]).stat().st_size > 1000
        assert Path(summary["series"]).exists()
        depths = {row.split("\t")[lines[1].split("\t").index("depth_s")]
                  for row in lines[2:]}
        assert depths == {"1", "2", "4"}


class TestSeeds:
    def test_seed_flag_overrides_env_and_config(self, tmp_path, monkeypatch, capsys):
        from genrec.config import load_config

        cfg_file = tmp_path / "c.ini"
        cfg_file.write_text("[pipeline]\nseed = 5\n")
        assert load_config(cfg_file).seed == 5
        monkeypatch.setenv("GENREC_SEED", "7")
        assert load_config(cfg_file).seed == 7
        assert load_config(cfg_file, seed_override=9).seed == 9
        assert load_config(cfg_file, seed_override=9).model.seed == 9

    def test_unknown_config_key_rejected(self, tmp_path):
        from genrec.config import load_config

        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nlearning = fast\n")
        with pytest.raises(KeyError, match="learning"):
            load_config(bad)
