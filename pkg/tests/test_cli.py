import json

from taxpath.cli import dispatch
from taxpath.dataset import read_records
from taxpath.util import read_jsonl


def run(*argv):
    return dispatch(list(argv))


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def gen_config(tmp_path, **synth):
    doc = {
        "seed": 7,
        "synth": {
            "leaves": 15,
            "samples": 200,
            "leaf_depth_min": 2,
            "leaf_depth_max": 3,
            **synth,
        },
        "encoder": {"hash_buckets": 256, "text_dim": 8, "cat_dim": 2,
                    "fields": ["bu_code", "ou_code", "system_code"]},
        "moe": {"levels": 3, "experts_per_level": 2, "expert_hidden_dim": 12},
        "train": {"batch_size": 32, "epochs": 2, "learning_rate": 5e-3, "optimizer": "adam",
                  "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "omega_c": 0.2, "omega_s": 0.2},
    }
    return write_config(tmp_path, doc)


def test_gen_writes_taxonomy_and_records(tmp_path):
    cfg = gen_config(tmp_path)
    out = tmp_path / "data"
    assert run("gen", "--config", cfg, "--out", str(out)) == 0
    assert (out / "taxonomy.json").exists()
    assert (out / "records.jsonl").exists()
    assert (out / "run_manifest.json").exists()
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "gen"
    assert manifest["seed"] == 7
    assert manifest["config"]["synth"]["leaves"] == 15
    assert not list(out.glob("*.tmp"))


def test_unknown_subcommand_exits_1(capsys):
    assert run("frobnicate") == 1


def test_missing_input_file_exits_2(tmp_path):
    cfg = gen_config(tmp_path)
    code = run(
        "cleanse",
        "--config", cfg,
        "--records", str(tmp_path / "nope.jsonl"),
        "--taxonomy", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "out.jsonl"),
    )
    assert code == 2


def test_invalid_config_exits_1(tmp_path):
    cfg = write_config(tmp_path, {"seed": 1, "synth": {"leaves": 0}})
    assert run("gen", "--config", cfg, "--out", str(tmp_path / "x")) == 1


def full_workflow(tmp_path, seed=7):
    cfg = gen_config(tmp_path)
    data = tmp_path / "data"
    run("gen", "--config", cfg, "--out", str(data))
    kept = tmp_path / "kept.jsonl"
    assert run("cleanse", "--config", cfg, "--records", str(data / "records.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(kept)) == 0
    splits = tmp_path / "splits"
    assert run("split", "--config", cfg, "--records", str(kept), "--out", str(splits)) == 0
    model = tmp_path / "model.ckpt"
    assert run("train", "--config", cfg, "--train", str(splits / "train.jsonl"),
               "--val", str(splits / "val.jsonl"), "--taxonomy", str(data / "taxonomy.json"),
               "--out", str(model), "--log", str(tmp_path / "log.jsonl")) == 0
    preds = tmp_path / "preds.jsonl"
    assert run("predict", "--config", cfg, "--model", str(model),
               "--records", str(splits / "test.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(preds)) == 0
    report = tmp_path / "report.json"
    assert run("eval", "--config", cfg, "--pred", str(preds), "--truth", str(splits / "test.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(report)) == 0
    return cfg, data, kept, splits, model, preds, report


def test_full_cli_workflow(tmp_path, capsys):
    cfg, data, kept, splits, model, preds, report = full_workflow(tmp_path)
    doc = json.loads(report.read_text())
    assert 0.0 <= doc["path_micro_f1"] <= 1.0
    table = capsys.readouterr().out
    assert "Path" in table and "Leaf" in table
    log_rows = list(read_jsonl(tmp_path / "log.jsonl"))
    assert len(log_rows) == 2
    assert set(log_rows[0]) == {"epoch", "train_loss", "val_leaf_acc", "seconds"}


def test_repath_then_eval_keeps_leaf_metrics(tmp_path, capsys):
    cfg, data, kept, splits, model, preds, report = full_workflow(tmp_path)
    repathed = tmp_path / "repathed.jsonl"
    assert run("repath", "--config", cfg, "--pred", str(preds),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(repathed)) == 0
    report2 = tmp_path / "report2.json"
    assert run("eval", "--config", cfg, "--pred", str(repathed), "--truth", str(splits / "test.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(report2)) == 0
    a = json.loads(report.read_text())
    b = json.loads(report2.read_text())
    assert a["leaf_macro_f1"] == b["leaf_macro_f1"]
    assert a["leaf_micro_f1"] == b["leaf_micro_f1"]
    assert b["path_micro_f1"] >= a["path_micro_f1"]


def test_eval_on_perfect_predictions(tmp_path):
    cfg = gen_config(tmp_path)
    data = tmp_path / "data"
    run("gen", "--config", cfg, "--out", str(data))
    records = read_records(data / "records.jsonl")
    rows = [
        {"id": r.id, "path": list(r.label_path), "leaf": r.leaf(), "mode": "leaf_confident",
         "leaf_confidence": 1.0, "per_level_argmax": list(r.label_path)}
        for r in records
    ]
    preds = tmp_path / "perfect.jsonl"
    preds.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    report = tmp_path / "report.json"
    assert run("eval", "--config", cfg, "--pred", str(preds), "--truth", str(data / "records.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(report)) == 0
    doc = json.loads(report.read_text())
    assert doc["path_macro_f1"] == doc["path_micro_f1"] == 1.0
    assert doc["leaf_macro_f1"] == doc["leaf_micro_f1"] == 1.0


def test_judge_subcommand(tmp_path, capsys):
    cfg = gen_config(tmp_path, label_noise_rate=0.2)
    data = tmp_path / "data"
    run("gen", "--config", cfg, "--out", str(data))
    judge_path = tmp_path / "judge.ckpt"
    code = run("judge", "--config", cfg, "--dev", str(data / "records.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(judge_path),
               "--annotate", str(data / "records.jsonl"),
               "--annotations", str(tmp_path / "ann.jsonl"))
    assert code == 0
    assert judge_path.exists()
    out = capsys.readouterr().out
    assert "agreement" in out
    rows = list(read_jsonl(tmp_path / "ann.jsonl"))
    assert len(rows) == 200
    assert all(r["verdict"] in ("Y", "N", "U") for r in rows)


def test_pipeline_subcommand(tmp_path):
    cfg = gen_config(tmp_path, label_noise_rate=0.1)
    data = tmp_path / "data"
    run("gen", "--config", cfg, "--out", str(data))
    out = tmp_path / "pipe"
    assert run("pipeline", "--config", cfg, "--records", str(data / "records.jsonl"),
               "--taxonomy", str(data / "taxonomy.json"), "--out", str(out)) == 0
    names = {p.name for p in out.iterdir()}
    assert names == {"cleansed.jsonl", "dev.jsonl", "judge.ckpt", "annotated.jsonl",
                     "final.ckpt", "metrics.json", "run_manifest.json"}


def test_flag_overrides_config_file(tmp_path):
    cfg = gen_config(tmp_path)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run("gen", "--config", cfg, "--out", str(out_a))
    run("gen", "--config", cfg, "--seed", "99", "--out", str(out_b))
    a = (out_a / "records.jsonl").read_bytes()
    b = (out_b / "records.jsonl").read_bytes()
    assert a != b
    manifest = json.loads((out_b / "run_manifest.json").read_text())
    assert manifest["seed"] == 99


def test_report_subcommand(tmp_path, capsys):
    cfg, data, kept, splits, model, preds, report = full_workflow(tmp_path)
    capsys.readouterr()
    csv_path = tmp_path / "cdf.csv"
    assert run("report", "--report", str(report), "--cdf-csv", str(csv_path)) == 0
    out = capsys.readouterr().out
    assert "Macro" in out and "per-depth" in out
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "confidence,cumulative_fraction"
    assert len(lines) >= 2
