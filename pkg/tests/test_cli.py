import csv
import hashlib

import pytest

from idbla.cli import EXIT_DATA, EXIT_USAGE, fmt, main


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree_digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(path.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--items", 80, "--workers", 20, "--seed", 1) == 0
    return out


def test_fmt():
    assert fmt(0.1) == "0.100000" and fmt(3) == "3" and fmt(float("nan")) == "nan"


def test_synth_files_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth", "--out", a, "--items", 10, "--workers", 2, "--seed", 4) == 0
    assert run("synth", "--out", b, "--items", 10, "--workers", 2, "--seed", 4) == 0
    assert set(tree_digest(a)) == {"labels.csv", "truth.csv", "index_map.csv", "levels.csv",
                                   "manifest.txt"}
    assert tree_digest(a) == tree_digest(b)
    assert len(read_csv(a / "truth.csv")) == 11
    assert len({row[0] for row in read_csv(a / "labels.csv")[1:]}) == 10
    assert "10 items" in capsys.readouterr().out


def test_synth_default_size(tmp_path):
    assert run("synth", "--out", tmp_path) == 0
    truth = read_csv(tmp_path / "truth.csv")
    workers = {row[1] for row in read_csv(tmp_path / "labels.csv")[1:]}
    assert len(truth) - 1 == 1000 and len(workers) <= 100


def test_synth_config_file(tmp_path):
    cfg = tmp_path / "gen.txt"
    cfg.write_text("num_items=12\nnum_workers=5\nseed=2\n")
    assert run("synth", "--out", tmp_path / "o", "--config", cfg) == 0
    assert "num_items=12" in (tmp_path / "o" / "manifest.txt").read_text()
    assert run("synth", "--out", tmp_path / "o2", "--config", cfg, "--items", 7) == 0
    assert len(read_csv(tmp_path / "o2" / "truth.csv")) == 8


def test_synth_bad_config(tmp_path):
    cfg = tmp_path / "gen.txt"
    cfg.write_text("bogus=1\n")
    assert run("synth", "--out", tmp_path / "o", "--config", cfg) == EXIT_USAGE


def test_mv_toy(tmp_path):
    labels = tmp_path / "toy.csv"
    labels.write_text("item,worker,label\na,w1,1\na,w2,2\nb,w1,1\n")
    assert run("aggregate", "--labels", labels, "--method", "mv", "--seed", 0,
               "--out", tmp_path / "o") == 0
    rows = read_csv(tmp_path / "o" / "predictions_run0.csv")
    assert rows[0][:2] == ["item", "label"] and len(rows) - 1 == 2


def test_cvi_writes_trace(small, tmp_path):
    out = tmp_path / "o"
    assert run("aggregate", "--labels", small / "labels.csv", "--method", "cvi",
               "--max-iters", 5, "--out", out) == 0
    trace = read_csv(out / "trace_run0.csv")
    assert trace[0] == ["iteration", "max_change"] and 1 <= len(trace) - 1 <= 5
    assert read_csv(out / "predictions_run0.csv")[0][:3] == ["item", "label", "level"]


def test_repeat_summary(small, tmp_path):
    out = tmp_path / "o"
    assert run("aggregate", "--labels", small / "labels.csv", "--truth", small / "truth.csv",
               "--evaluate", "--method", "dsem", "--repeat", 3, "--seed", 5, "--out", out) == 0
    summary = read_csv(out / "summary.csv")
    assert [r[0] for r in summary[1:]] == ["0", "1", "2", "mean", "std"]
    assert [r[1] for r in summary[1:4]] == ["5", "6", "7"]
    assert all(len(r[2].split(".")[1]) == 6 for r in summary[1:])
    assert {f"predictions_run{r}.csv" for r in range(3)} <= set(tree_digest(out))


@pytest.mark.parametrize("argv", [
    ["--method", "bogus", "--seed", 0],
    ["--method", "idbla"],
    ["--method", "mv", "--seed", 0, "--evaluate"],
    ["--method", "fidbla", "--seed", 0, "--levels", 2],
    ["--method", "mv", "--seed", 0, "--omega", -1],
])
def test_aggregate_usage_errors(small, tmp_path, argv):
    out = tmp_path / "o"
    assert run("aggregate", "--labels", small / "labels.csv", "--out", out, *argv) == EXIT_USAGE
    assert not out.exists()


def test_usage_errors(capsys):
    assert run() == EXIT_USAGE
    assert run("nope") == EXIT_USAGE
    assert run("aggregate", "--method", "mv") == EXIT_USAGE


def test_missing_file_is_data_error(tmp_path):
    assert run("aggregate", "--labels", tmp_path / "none.csv", "--seed", 0,
               "--out", tmp_path / "o") == EXIT_DATA


def test_bad_label_file_is_data_error(tmp_path):
    labels = tmp_path / "bad.csv"
    labels.write_text("item,worker,label\na,w1,0\n")
    assert run("aggregate", "--labels", labels, "--seed", 0, "--out", tmp_path / "o") == EXIT_DATA


def test_evaluate_perfect(small, tmp_path, capsys):
    pred = tmp_path / "pred.csv"
    rows = read_csv(small / "truth.csv")
    pred.write_text("item,label\n" + "".join(f"{i},{c}\n" for i, c in rows[1:]))
    out = tmp_path / "rep"
    assert run("evaluate", "--pred", pred, "--truth", small / "truth.csv", "--out", out) == 0
    report = dict(read_csv(out / "report.csv")[1:])
    assert report["error_rate"] == "0.000000" and report["items_evaluated"] == "80"


def test_evaluate_difficulty_report(small, tmp_path):
    agg = tmp_path / "agg"
    assert run("aggregate", "--labels", small / "labels.csv", "--method", "idbla", "--seed", 0,
               "--samples", 30, "--burnin", 10, "--out", agg) == 0
    out = tmp_path / "rep"
    assert run("evaluate", "--pred", agg / "predictions_run0.csv", "--truth",
               small / "truth.csv", "--labels", small / "labels.csv", "--levels", 2,
               "--out", out) == 0
    keys = [r[0] for r in read_csv(out / "report.csv")[1:]]
    assert "level_1_label_error" in keys and "level_2_label_error" in keys


def test_evaluate_mismatched_items(small, tmp_path):
    pred = tmp_path / "pred.csv"
    pred.write_text("item,label\nitem00,1\n")
    out = tmp_path / "rep"
    assert run("evaluate", "--pred", pred, "--truth", small / "truth.csv", "--out", out) == EXIT_DATA
    assert not out.exists()


@pytest.mark.parametrize("body", ["item,label\nitem00,x\n", "label,item\n1,a\n",
                                  "item,label\nitem00\n", "item,label\n"])
def test_evaluate_malformed(small, tmp_path, body):
    pred = tmp_path / "pred.csv"
    pred.write_text(body)
    out = tmp_path / "rep"
    assert run("evaluate", "--pred", pred, "--truth", small / "truth.csv", "--out", out) != 0
    assert not out.exists()


def test_select_h_single_row(small, tmp_path, capsys):
    out = tmp_path / "sel"
    assert run("select-h", "--labels", small / "labels.csv", "--candidates", 2,
               "--samples", 20, "--burnin", 5, "--out", out) == 0
    rows = read_csv(out / "select_h.csv")
    assert len(rows) - 1 == 1 and rows[1][0] == "2"
    text = capsys.readouterr().out
    assert "selected H = 2" in text and "plug-in" in text


def test_select_h_fidbla_minimum(small):
    assert run("select-h", "--labels", small / "labels.csv", "--method", "fidbla",
               "--candidates", "2,3") == EXIT_USAGE


def test_manifest_rerun_and_inputs_untouched(small, tmp_path):
    before = tree_digest(small)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("aggregate", "--labels", small / "labels.csv", "--truth", small / "truth.csv",
               "--evaluate", "--method", "idbla", "--seed", 3, "--samples", 20, "--burnin", 5,
               "--out", a) == 0
    manifest = (a / "manifest.txt").read_text()
    assert manifest.count("command=") == 1 and "seed=3" in manifest
    assert run("aggregate", "--config", a / "manifest.txt", "--out", b) == 0
    assert tree_digest(a) == tree_digest(b)
    assert tree_digest(small) == before


def test_config_flags_override(small, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("aggregate", "--labels", small / "labels.csv", "--method", "mv", "--seed", 1,
               "--out", a) == 0
    assert run("aggregate", "--config", a / "manifest.txt", "--seed", 2, "--out", b) == 0
    assert "seed=2" in (b / "manifest.txt").read_text()


def test_config_wrong_command(small, tmp_path):
    a = tmp_path / "a"
    assert run("aggregate", "--labels", small / "labels.csv", "--seed", 1, "--out", a) == 0
    assert run("select-h", "--config", a / "manifest.txt") == EXIT_USAGE


def test_synth_allow_unlabeled(tmp_path):
    out = tmp_path / "o"
    assert run("synth", "--out", out, "--items", 40, "--workers", 2, "--seed", 0,
               "--allow-unlabeled") == 0
    labeled = {row[0] for row in read_csv(out / "labels.csv")[1:]}
    assert len(labeled) < 40 and len(read_csv(out / "truth.csv")) - 1 == 40
    assert "cover_items=false" in (out / "manifest.txt").read_text()
