import hashlib
import json

import pytest

from edgemoe.cli import compare_reports, main
from edgemoe.errors import ComparisonError

from _factories import SCENARIOS, scenario_dict

MINIMAL = str(SCENARIOS / "minimal.json")


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_trace_writes_file_and_is_reproducible(tmp_path, capsys):
    assert main(["trace", MINIMAL, "--out", str(tmp_path / "a")]) == 0
    assert main(["trace", MINIMAL, "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "trace.json", tmp_path / "b" / "trace.json"
    assert a.stat().st_size > 0
    assert _sha(a) == _sha(b)
    assert "128 tokens" in capsys.readouterr().out


def test_seed_flag_changes_trace(tmp_path):
    main(["trace", MINIMAL, "--out", str(tmp_path / "a")])
    main(["trace", MINIMAL, "--out", str(tmp_path / "b"), "--seed", "99"])
    assert _sha(tmp_path / "a" / "trace.json") != _sha(tmp_path / "b" / "trace.json")


def test_missing_model_section_exits_2(tmp_path, capsys):
    d = scenario_dict()
    del d["model"]
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    assert main(["trace", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "model" in capsys.readouterr().err


def test_existing_output_needs_force(tmp_path):
    out = str(tmp_path / "o")
    assert main(["trace", MINIMAL, "--out", out]) == 0
    assert main(["trace", MINIMAL, "--out", out]) == 2
    assert main(["trace", MINIMAL, "--out", out, "--force"]) == 0


def test_plan_single_server_prints_zero_crossings(tmp_path, capsys):
    assert main(["plan", MINIMAL, "--out", str(tmp_path)]) == 0
    assert "expected crossings 0;" in capsys.readouterr().out
    placement = json.loads((tmp_path / "placement.json").read_text())
    assert placement["shared_hosts"] == [1]
    assert (tmp_path / "quant.json").exists()


def test_plan_infeasible_exits_3(tmp_path, capsys):
    d = scenario_dict()
    d["topology"]["servers"][0]["gpu_mem_bytes"] = 1e7
    d["topology"]["servers"][0]["ssd_bytes"] = 1e6
    p = tmp_path / "s.json"
    p.write_text(json.dumps(d))
    assert main(["plan", str(p), "--out", str(tmp_path / "o")]) == 3
    assert "shortfall" in capsys.readouterr().err


def test_run_dry_run_skips_simulation(tmp_path):
    assert main(["run", MINIMAL, "--out", str(tmp_path), "--dry-run"]) == 0
    assert (tmp_path / "placement.json").exists()
    assert not (tmp_path / "report.json").exists()


def test_run_writes_reports_and_fixed_mode_reuses_plan(tmp_path):
    assert main(["run", MINIMAL, "--out", str(tmp_path / "r")]) == 0
    for name in ("report.json", "requests.csv", "throughput.csv", "placement.json", "quant.json"):
        assert (tmp_path / "r" / name).exists()
    d = scenario_dict()
    d["deployment"] = {"mode": "fixed", "placement_file": str(tmp_path / "r" / "placement.json"),
                       "quant_file": str(tmp_path / "r" / "quant.json")}
    p = tmp_path / "fixed.json"
    p.write_text(json.dumps(d))
    assert main(["run", str(p), "--out", str(tmp_path / "f")]) == 0
    a = json.loads((tmp_path / "r" / "report.json").read_text())
    b = json.loads((tmp_path / "f" / "report.json").read_text())
    assert a["buckets"] == b["buckets"]


def test_run_several_scenarios_in_parallel(tmp_path):
    d = scenario_dict()
    d["name"] = "other"
    d["seed"] = 8
    p = tmp_path / "other.json"
    p.write_text(json.dumps(d))
    assert main(["run", MINIMAL, str(p), "--out", str(tmp_path / "o"), "--jobs", "2"]) == 0
    assert (tmp_path / "o" / "minimal" / "report.json").exists()
    assert (tmp_path / "o" / "other" / "report.json").exists()


def _bucketed(lat, tput, keys=((128, 256),)):
    return {"buckets": [{"input_len": i, "output_len": o, "avg_latency_s": lat, "avg_generation_throughput": tput}
                        for i, o in keys]}


def test_compare_identity_and_bands(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(_bucketed(1.0, 169.0)))
    b.write_text(json.dumps(_bucketed(1.69, 100.0)))
    assert main(["compare", str(a), str(a)]) == 0
    assert capsys.readouterr().out.splitlines()[1] == "128,256,1,1,1,169,169,1,1"
    rows = compare_reports(_bucketed(0.7, 3.0), _bucketed(0.7, 3.0))
    assert rows[0]["latency_ratio"] == rows[0]["throughput_ratio"] == 1.0
    assert main(["compare", str(a), str(b), "--latency-band", "1.4", "2.0"]) == 0
    assert main(["compare", str(a), str(b), "--latency-band", "1.0", "1.1"]) == 4
    assert main(["compare", str(a), str(b), "--throughput-band", "1.2", "2.0"]) == 0


def test_compare_mismatched_buckets(tmp_path):
    with pytest.raises(ComparisonError):
        compare_reports(_bucketed(1, 1), _bucketed(1, 1, keys=((1, 2),)))
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps(_bucketed(1, 1)))
    b.write_text(json.dumps(_bucketed(1, 1, keys=((1, 2),))))
    assert main(["compare", str(a), str(b)]) == 2


def test_report_command(tmp_path, capsys):
    main(["run", MINIMAL, "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["report", str(tmp_path / "report.json")]) == 0
    out = capsys.readouterr().out
    assert "minimal" in out and "tok/s" in out
