import csv
import json
import os
import re

import pytest

from cepa.cli import main

TINY = """[experiment]
version = 1
seed = 1
out = {out}

[dataset]
per_class_train = 40
per_class_test = 30
size = 8

[attack]
kind = {kind}
per_class_poison_count = 8

[training]
epochs = 4

[defense]
per_class = 5
max_iterations = 4
step_size = 0.1
layers = 1,8
{extra}

[verify]
steps = 3
per_class = 10
dump_deltas = true
"""


def write_config(tmp_path, kind="patch", extra="", name="c.ini"):
    out = tmp_path / "run"
    path = tmp_path / name
    path.write_text(TINY.format(out=out, kind=kind, extra=extra))
    return str(path), out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def detected_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg, out = write_config(tmp)
    assert main(["train", "--config", cfg]) == 0
    assert main(["detect", "--config", cfg]) == 0
    return tmp, cfg, out


def test_malformed_config_writes_nothing(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[experiment]\nversion = 1\nout = %s\n[attack]\nkind = laser\n" % (tmp_path / "o"))
    assert main(["all", "--config", str(path)]) == 1
    assert not (tmp_path / "o").exists()
    path.write_text("garbage without sections")
    assert main(["train", "--config", str(path)]) == 1


def test_unknown_key_rejected(tmp_path, capsys):
    cfg, out = write_config(tmp_path, extra="speed = 11")
    assert main(["train", "--config", cfg]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert not out.exists()


def test_missing_report_and_empty_run_dir(tmp_path):
    cfg, out = write_config(tmp_path)
    assert main(["verify", "--config", cfg]) == 1
    assert main(["figures", "--config", cfg]) == 1
    assert main(["detect", "--config", cfg]) == 1  # no checkpoint yet


def test_train_outputs(detected_run):
    _, _, out = detected_run
    rows = read_csv(out / "train.csv")
    assert rows[0] == ["epoch", "lr", "train_loss", "test_acc"] and len(rows) == 5
    info = json.loads((out / "train.json").read_text())
    assert info["attack"] == "patch" and 0 <= info["asr_ground_truth"] <= 1


def test_detect_outputs(detected_run):
    _, _, out = detected_run
    report = json.loads((out / "report.json").read_text())
    assert sorted(report["layers"]) == ["1", "8"]
    assert report["verdict"] in ("clean", "poisoned")
    for layer in (1, 8):
        for t in range(5):
            trace = read_csv(out / "detect" / f"{layer}_{t}.csv")
            assert trace[0] == ["iteration", "objective", "misclass_rate", "lambda", "mean_delta_norm"]
            assert len(trace) == 1 + 4
    figs = sorted(os.listdir(out / "figs"))
    charts = [f for f in figs if f.endswith(".svg")]
    assert len(charts) == 2 * 2
    assert len(os.listdir(out / "figs" / "cossim")) == 2


def test_chart_bars_match_stats(detected_run):
    _, _, out = detected_run
    rows = read_csv(out / "detect" / "stats.csv")
    head = rows[0]
    mu = {int(r[1]): float(r[head.index("mu_norm")]) for r in rows[1:] if r[0] == "8"}
    text = (out / "figs" / "layer8_mu_norm.svg").read_text()
    bars = re.findall(r'<g id="bar-(\d+)">(.*?)</g>', text, flags=re.S)
    assert len(bars) == 5
    heights = {}
    for k, body in bars:
        ys = [float(v) for v in re.findall(r"[ML] [\d.]+ ([\d.]+)", body)]
        heights[int(k)] = max(ys) - min(ys)
    top = max(mu, key=mu.get)
    for t in mu:
        assert abs(heights[t] / heights[top] - mu[t] / mu[top]) < 1e-3


def test_figures_byte_identical(detected_run):
    _, cfg, out = detected_run
    before = {f: (out / "figs" / f).read_bytes() for f in os.listdir(out / "figs") if f.endswith(".svg")}
    assert main(["figures", "--config", cfg]) == 0
    for f, data in before.items():
        assert (out / "figs" / f).read_bytes() == data


def _force_detection(out, target=4, layer=8):
    path = out / "report.json"
    report = json.loads(path.read_text())
    report["detection_layers"] = {str(target): layer}
    report["detected_targets"] = [target]
    report["verdict"] = "poisoned"
    path.write_text(json.dumps(report))


def test_verify_clean_verdict_rejected(detected_run, capsys):
    _, cfg, out = detected_run
    original = (out / "report.json").read_text()
    report = json.loads(original)
    report["detection_layers"], report["detected_targets"], report["verdict"] = {}, [], "clean"
    (out / "report.json").write_text(json.dumps(report))
    try:
        assert main(["verify", "--config", cfg]) == 1
        assert "clean" in capsys.readouterr().err
    finally:
        (out / "report.json").write_text(original)


def test_verify_table_round_trip(detected_run):
    _, cfg, out = detected_run
    original = (out / "report.json").read_text()
    _force_detection(out)
    try:
        assert main(["verify", "--config", cfg]) == 0
    finally:
        (out / "report.json").write_text(original)
    rows = read_csv(out / "table1.csv")
    assert rows[0] == ["row", "patch"]
    assert [r[0] for r in rows[1:]] == ["GT", "(1)", "(3)"]
    (res,) = json.loads((out / "verify.json").read_text())["results"]
    assert float(rows[1][1]) == res["asr_ground_truth"]
    assert float(rows[2][1]) == res["asr_objective"]
    assert float(rows[3][1]) == res["asr_resynthesized"]
    assert (out / "verify" / "deltas_t4.bin").exists()


def test_checkpoint_mismatch_rejected(detected_run, tmp_path):
    _, _, out = detected_run
    cfg, other = write_config(tmp_path)
    text = open(cfg).read().replace("size = 8", "size = 12")
    open(cfg, "w").write(text)
    os.makedirs(other)
    (other / "model.ckpt").write_bytes((out / "model.ckpt").read_bytes())
    assert main(["detect", "--config", cfg]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    cfg, _ = write_config(tmp_path)
    text = open(cfg).read().replace("epochs = 4", "epochs = 4\ninitial_lr = 1e30")
    open(cfg, "w").write(text)
    assert main(["train", "--config", cfg]) == 2


def test_all_clean_is_deterministic(tmp_path):
    cfg, out = write_config(tmp_path, kind="none")
    assert main(["all", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "2"]) == 0
    assert main(["all", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads((tmp_path / "a" / "train.json").read_text())["asr_ground_truth"] is None
