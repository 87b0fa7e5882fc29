import csv
import json

import pytest

from waftm.report import ReportError, load_log, write_report

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def write_log(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return str(path)


def xe_entries():
    entries = []
    for step in range(6):
        entries.append({"step": step, "epoch": step // 3, "mode": "xe",
                        "loss": 2.0 / (step + 1)})
        if step % 3 == 2:
            entries.append({"step": step + 1, "epoch": step // 3 + 1, "mode": "xe",
                            "loss": 1.5 / (step + 1),
                            "val_metrics": {"B@4": 0.1 * step, "R": 0.2, "C": 1.0}})
    return entries


def test_load_log_round_trip(tmp_path):
    entries = xe_entries()
    path = write_log(tmp_path / "log.jsonl", entries)
    assert load_log(path) == entries


def test_load_log_errors(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ReportError, match="no entries"):
        load_log(str(path))
    path.write_text('{"step": 0}\n', encoding="utf-8")
    with pytest.raises(ReportError, match="missing"):
        load_log(str(path))
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(ReportError, match="line 1|:1:"):
        load_log(str(path))
    with pytest.raises(ReportError, match="cannot read"):
        load_log(str(tmp_path / "absent.jsonl"))


def test_write_report_xe(tmp_path):
    entries = xe_entries()
    produced = write_report(entries, tmp_path / "out")
    assert set(produced) == {"loss", "val_metrics", "summary"}
    for name in ("loss", "val_metrics"):
        data = open(produced[name], "rb").read()
        assert data.startswith(PNG_MAGIC)
        assert len(data) > 1000
    with open(produced["summary"], newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(entries)
    assert rows[0]["loss"] == "2.0"
    assert rows[0]["B@4"] == ""
    val_rows = [r for r in rows if r["B@4"] != ""]
    assert len(val_rows) == 2
    assert float(val_rows[0]["C"]) == 1.0


def test_write_report_scst_reward_figure(tmp_path):
    entries = [{"step": s, "epoch": 0, "mode": "scst",
                "loss": -0.01 * s, "reward": 0.5 + 0.1 * s} for s in range(4)]
    produced = write_report(entries, tmp_path / "out")
    assert "reward" in produced
    assert open(produced["reward"], "rb").read().startswith(PNG_MAGIC)
    assert "val_metrics" not in produced


def test_write_report_only_val_entries_still_plots_loss(tmp_path):
    entries = [{"step": 3, "epoch": 1, "mode": "xe", "loss": 0.9,
                "val_metrics": {"B@4": 0.3, "R": 0.4, "C": 2.0}}]
    produced = write_report(entries, tmp_path / "out")
    assert open(produced["loss"], "rb").read().startswith(PNG_MAGIC)
