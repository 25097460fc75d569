import argparse
import json
import subprocess
import sys

import pytest

import hybridgraph.cli as cli
from hybridgraph.cli import build_parser, run
from hybridgraph.errors import NumericError

from scenarios import three_object_frames
from test_dataio import digest

SUBCOMMANDS = ["gen-synth", "train", "detect", "eval", "gradcheck", "link-tubes"]
TINY_SYNTH = {"n_videos": 4, "n_test_videos": 2, "n_snippets_min": 20, "n_snippets_max": 20, "feature_dim": 6}
TINY_TRAIN = {"N": 16, "d_head": 3, "temporal_hidden": 6, "epochs": 1}


def subparsers():
    p = build_parser()
    action = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


@pytest.fixture
def synth(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synthetic": TINY_SYNTH, "train": TINY_TRAIN}))
    assert run(["gen-synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    return tmp_path, cfg


def test_all_subcommands_registered():
    assert sorted(subparsers()) == sorted(SUBCOMMANDS)


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_lists_defaults(name, capsys):
    sub = subparsers()[name]
    for action in sub._actions:
        if isinstance(action, argparse._HelpAction) or action.required:
            continue
        assert "default" in (action.help or ""), f"{name} {action.option_strings} has no documented default"
    with pytest.raises(SystemExit) as exc:
        run([name, "--help"])
    assert exc.value.code == 0
    assert "default" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "hybridgraph.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and all(s in out.stdout for s in SUBCOMMANDS)


def test_usage_errors(capsys):
    assert run([]) == 1
    assert run(["train"]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["eval", "--pred", "p", "--gt", "g", "--out", "o", "--preset", "imagenet"]) == 1
    err = capsys.readouterr().err
    assert "required" in err


def test_gradcheck_contract(capsys):
    assert run(["gradcheck", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert float(out.split()[3]) < 1e-4


def test_gradcheck_failure_exit(monkeypatch, capsys):
    monkeypatch.setattr(cli, "model_gradient_error", lambda seed: 1.0)
    assert run(["gradcheck"]) == 3


def test_gen_synth_deterministic(synth):
    tmp, cfg = synth
    assert run(["gen-synth", "--config", str(cfg), "--out", str(tmp / "e")]) == 0
    assert digest(tmp / "d") == digest(tmp / "e")
    assert run(["gen-synth", "--config", str(cfg), "--out", str(tmp / "f"), "--seed", "8"]) == 0
    assert digest(tmp / "d") != digest(tmp / "f")


def test_config_unknown_keys(tmp_path):
    for doc in ({"trainer": {}}, {"train": {"epochz": 1}}, {"synthetic": {"videos": 2}}):
        (tmp_path / "c.json").write_text(json.dumps(doc))
        assert run(["gen-synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 1
    (tmp_path / "c.json").write_text("{")
    assert run(["gen-synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 1


def test_pipeline_and_precedence(synth):
    tmp, cfg = synth
    d = tmp / "d"
    train_args = ["train", "--config", str(cfg), "--features", str(d / "train/features"),
                  "--annotations", str(d / "train/annotations.csv")]
    assert run(train_args + ["--out", str(tmp / "ck.json")]) == 0
    ck = json.loads((tmp / "ck.json").read_text())
    assert ck["config"]["N"] == 16 and ck["epoch"] == 1  # config overrides defaults
    assert run(train_args + ["--out", str(tmp / "ck0.json"), "--epochs", "0"]) == 0
    assert json.loads((tmp / "ck0.json").read_text())["epoch"] == 0  # flags override config

    assert run(["detect", "--checkpoint", str(tmp / "ck.json"), "--features", str(d / "test/features"),
                "--out", str(tmp / "pred.csv"), "--theta", "0.3"]) == 0
    assert (tmp / "pred.csv").read_text().startswith("video_id,class_id,start_snippet,end_snippet,score\n")

    assert run(["eval", "--pred", str(tmp / "pred.csv"), "--gt", str(d / "test/annotations.csv"),
                "--preset", "road", "--out", str(tmp / "ev")]) == 0
    report = json.loads((tmp / "ev/report.json").read_text())
    assert report["thresholds"] == [0.1, 0.2, 0.3, 0.4, 0.5]
    assert run(["eval", "--pred", str(tmp / "pred.csv"), "--gt", str(d / "test/annotations.csv"),
                "--thresholds", "0.3,0.5,0.7", "--preset", "road", "--out", str(tmp / "ev2")]) == 0
    assert json.loads((tmp / "ev2/report.json").read_text())["thresholds"] == [0.3, 0.5, 0.7]


def test_eval_preset_from_config(tmp_path):
    (tmp_path / "p.csv").write_text("video_id,class_id,start_snippet,end_snippet,score\nv,0,0,3,0.9\n")
    (tmp_path / "g.csv").write_text("video_id,class_id,start_snippet,end_snippet\nv,0,0,3\n")
    (tmp_path / "c.json").write_text(json.dumps({"preset": "activitynet"}))
    assert run(["eval", "--config", str(tmp_path / "c.json"), "--pred", str(tmp_path / "p.csv"),
                "--gt", str(tmp_path / "g.csv"), "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev/report.json").read_text())["thresholds"] == [0.5, 0.7, 0.95]
    assert run(["eval", "--pred", str(tmp_path / "p.csv"), "--gt", str(tmp_path / "g.csv"),
                "--out", str(tmp_path / "ev")]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "g.csv").write_text("video_id,class_id,start_snippet,end_snippet\nv,0,5,2\n")
    (tmp_path / "p.csv").write_text("video_id,class_id,start_snippet,end_snippet,score\n")
    assert run(["eval", "--pred", str(tmp_path / "p.csv"), "--gt", str(tmp_path / "g.csv"), "--preset", "road",
                "--out", str(tmp_path / "ev")]) == 2
    assert "row 2" in capsys.readouterr().err
    assert run(["eval", "--pred", str(tmp_path / "missing.csv"), "--gt", str(tmp_path / "g.csv"),
                "--preset", "road", "--out", str(tmp_path / "ev")]) == 2
    assert run(["detect", "--checkpoint", str(tmp_path / "g.csv"), "--features", str(tmp_path),
                "--out", str(tmp_path / "x.csv")]) == 2


def test_numeric_failure_exit_3(synth, monkeypatch):
    tmp, cfg = synth

    def boom(*a, **k):
        raise NumericError("loss diverged at epoch 0, step 3")

    monkeypatch.setattr(cli, "train", boom)
    assert run(["train", "--features", str(tmp / "d/train/features"), "--annotations",
                str(tmp / "d/train/annotations.csv"), "--out", str(tmp / "ck.json")]) == 3


def test_link_tubes(tmp_path):
    rows = ["video_id,frame,x1,y1,x2,y2,agentness," + ",".join(f"score_{i}" for i in range(6))]
    for f, dets in three_object_frames().items():
        for d in dets:
            rows.append(",".join(["vid", str(f)] + [repr(v) for v in d.box] + [repr(d.agentness)]
                                 + [repr(float(s)) for s in d.class_scores]))
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    assert run(["link-tubes", "--detections", str(tmp_path / "d.csv"), "--out", str(tmp_path / "t.json")]) == 0
    tubes = json.loads((tmp_path / "t.json").read_text())["vid"]
    assert [t["tube_id"] for t in tubes] == [0, 1, 2, 3]
    assert [len(t["entries"]) for t in tubes] == [20, 20, 5, 8]
    assert tubes[0]["labels"] == [0, 1, 2, 3]


def test_writes_only_under_out(synth):
    tmp, cfg = synth
    before = {p for p in tmp.rglob("*")}
    assert run(["gen-synth", "--config", str(cfg), "--out", str(tmp / "only")]) == 0
    created = {p for p in tmp.rglob("*")} - before
    assert created and all(p == tmp / "only" or tmp / "only" in p.parents for p in created)
