import json
import subprocess
import sys

import pytest

from helpers import CLIENT, SERVER, conversation, pcap_bytes
from leakscope.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from leakscope.ingest import read_dataset


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def os_config(tmp_path, **extra):
    return {"task": "os_fingerprint", "seed": 3,
            "input": {"generate": {"preset": "imessage", "samples_per_class": 60}},
            "evaluation": {"k": 5, "n_values": [1, 5], "instances_per_n": 200}, **extra}


def test_generate_then_run_os(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "g"), "--seed", "2"]) == EXIT_OK
    ds = read_dataset(tmp_path / "g" / "dataset.jsonl")
    assert len(ds) == 2 * 5 * 2 * 250
    cfg = {"task": "os_fingerprint", "input": {"dataset": "g/dataset.jsonl"},
           "evaluation": {"k": 5, "n_values": [5], "instances_per_n": 300}}
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "r")]) == EXIT_OK
    report = json.loads((tmp_path / "r" / "os_fingerprint_report.json").read_text())
    assert report["task"] == "os_fingerprint"
    assert report["result"]["curve"][0]["accuracy"] == 1.0
    assert (tmp_path / "r" / "os_fingerprint_curve.csv").read_text().startswith("n,accuracy,count\n5,1.0,")


def test_reports_are_byte_identical(tmp_path):
    c = write(tmp_path / "c.json", os_config(tmp_path))
    for d in ("a", "b"):
        assert main(["run", "--config", c, "--out", str(tmp_path / d), "--jobs", "2" if d == "b" else "1"]) == EXIT_OK
    a = (tmp_path / "a" / "os_fingerprint_report.json").read_bytes()
    assert a == (tmp_path / "b" / "os_fingerprint_report.json").read_bytes()
    assert main(["run", "--config", c, "--out", str(tmp_path / "s"), "--seed", "4"]) == EXIT_OK
    assert a != (tmp_path / "s" / "os_fingerprint_report.json").read_bytes()


@pytest.mark.parametrize("task", ["action_classify", "length_regress", "language_classify", "countermeasure_eval"])
def test_tasks_run_and_render(tmp_path, capsys, task):
    gen = {"preset": "imessage-language", "samples_per_class": 400} if task == "language_classify" \
        else {"preset": "imessage", "samples_per_class": 250}
    cfg = {"task": task, "input": {"generate": gen},
           "evaluation": {"k": 4, "n_values": [1, 3], "instances_per_n": 80, "instances": 200,
                          "attacks": ["os", "length"], "language_n": 3}}
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    report = tmp_path / f"{task}_report.json"
    assert main(["report", str(report), "--out", str(tmp_path / "csv")]) == EXIT_OK
    text = capsys.readouterr().out
    assert task in text
    if task == "action_classify":
        assert any(p.name.startswith("action_classify_confusion_") for p in (tmp_path / "csv").iterdir())


def test_padding_applies_to_attack_tasks(tmp_path):
    cfg = os_config(tmp_path, padding={"kind": "uniform_to_max", "max": "auto"})
    assert main(["run", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "os_fingerprint_report.json").read_text())
    assert report["config"]["padding"] == {"kind": "uniform_to_max", "max": "auto"}
    assert report["result"]["curve"][1]["accuracy"] < 0.9


def test_ingest_pcap(tmp_path):
    pcap = tmp_path / "c.pcap"
    pcap.write_bytes(pcap_bytes(conversation()[0]))
    cfg = {"capture": {"service_addresses": [SERVER]},
           "label": {"service": "iMessage", "os": "iOS", "action": "Text", "language": "English", "plaintext_chars": 10}}
    assert main(["ingest", str(pcap), "--config", write(tmp_path / "i.json", cfg), "--out", str(tmp_path)]) == EXIT_OK
    ds = read_dataset(tmp_path / "dataset.jsonl")
    assert [p.payload_length for p in ds.traces[0].packets] == [101, 37, 196, 53]
    assert CLIENT in ds.traces[0].packets[0].stream_id


def test_exit_codes(tmp_path):
    missing = {"task": "os_fingerprint", "input": {"dataset": "nope.jsonl"}}
    assert main(["run", "--config", write(tmp_path / "m.json", missing)]) == EXIT_DATA
    assert main(["run", "--config", write(tmp_path / "t.json", {"task": "dance", "input": {}})]) == EXIT_CONFIG
    assert main(["run", "--config", write(tmp_path / "u.json", {**missing, "colour": 1})]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\x00" * 40)
    lab = write(tmp_path / "l.json", {"label": {"service": "iMessage", "os": "iOS", "action": "Stop"}})
    assert main(["ingest", str(bad), "--config", lab]) == EXIT_DATA
    assert main(["report", str(tmp_path / "none.json")]) == EXIT_DATA
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_CONFIG


def test_module_entry_and_log_level(tmp_path):
    cfg = write(tmp_path / "c.json", os_config(tmp_path))
    env = {"LEAKSCOPE_LOG": "debug", "PATH": "/usr/bin:/bin"}
    p = subprocess.run([sys.executable, "-m", "leakscope", "run", "--config", cfg, "--out", str(tmp_path)],
                       capture_output=True, text=True, env=env)
    assert p.returncode == 0
    assert "DEBUG" in p.stderr or "INFO" in p.stderr
    q = subprocess.run([sys.executable, "-m", "leakscope", "run", "--config", cfg, "--out", str(tmp_path)],
                       capture_output=True, text=True, env={**env, "LEAKSCOPE_LOG": "error"})
    assert q.returncode == 0 and q.stderr == ""
