import dataclasses
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from np_aqm import cli
from np_aqm.classifier import CapsuleDirective
from np_aqm.metrics import AuditError
from np_aqm.scenario import RedParams, Scenario, dumps, load_scenario, loads
from np_aqm.traffic import ConfigError, SizeModel, TrafficConfig


def test_minimal_file_gets_defaults(tmp_path):
    f = tmp_path / "m.scn"
    f.write_text("seed=1\n")
    s = load_scenario(f)
    assert s == Scenario()
    assert s.soft_threshold == 0.85
    assert s.refresh_interval_ns == 50_000_000
    assert s.tbuf_elems * 64 == 8192 and s.rbuf_elems * 64 == 8192


def test_red_max_p_out_of_range():
    with pytest.raises(ConfigError) as e:
        loads("policy = red\n[red]\nmax_p = 1.5\n")
    assert e.value.key == "red.max_p" and "(0, 1]" in str(e.value)


@pytest.mark.parametrize("text, key", [
    ("[traffic]\nflows = 3\n", "traffic.flows"),
    ("[nope]\n", "[nope]"),
    ("seed = 1\nseed = 2\n", "seed"),
    ("seed = x\n", "seed"),
    ("policy = fifo\n", "policy"),
    ("[ports]\nsoft_threshold = 0\n", "ports.soft_threshold"),
    ("[classifier]\nmap.EF = 9\n", "classifier.map.EF"),
    ("[traffic]\nflow_count = 0\n", "traffic.flow_count"),
])
def test_load_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as e:
        loads(text)
    assert e.value.key.startswith(key)


def test_comments_and_capsules_parse():
    s = loads("# header\nseed = 4  # trailing\n[traffic]\nflow_count = 8\n"
              "CAPSULE SetFlowPriority at=100 flow=2 level=PRIV\n")
    assert s.seed == 4 and s.traffic.flow_count == 8
    (at, d), = s.capsules
    assert at == 100 and d.kind == "SetFlowPriority" and d.args == {"flow": "2", "level": "PRIV"}


def test_congestion_file_round_trip():
    s = load_scenario("scenarios/congestion.scn")
    assert loads(dumps(s)) == s
    assert s.policies == ("anaqm", "red", "droptail")


scenarios = st.builds(
    Scenario,
    traffic=st.builds(TrafficConfig, flow_count=st.integers(4, 500), seed=st.integers(0, 2**40),
                      duration_ns=st.integers(50_000_000, 10**9),
                      size_model=st.sampled_from([SizeModel(), SizeModel(64, 1500), SizeModel(100, 100)]),
                      ingress=st.sampled_from(["flow_hash", "alternate"])),
    policies=st.lists(st.sampled_from(["droptail", "red", "anaqm"]), min_size=1, max_size=3,
                      unique=True).map(tuple),
    soft_threshold=st.floats(0.01, 1.0),
    deferred_capacity=st.integers(0, 5000),
    red=st.builds(RedParams, w_q=st.floats(1e-4, 1.0), max_p=st.floats(1e-3, 1.0)),
    capsules=st.lists(st.tuples(st.integers(0, 10**8), st.builds(
        CapsuleDirective, kind=st.sampled_from(["Trace", "SetPortThreshold"]),
        args=st.just({"port": "1", "fraction": "0.5"}))), max_size=3).map(tuple),
    event_log=st.booleans(),
)


@settings(max_examples=60)
@given(scenarios)
def test_round_trip_identity(s):
    text = dumps(s)
    assert loads(text) == s
    assert dumps(loads(text)) == text


def test_config_hash_tracks_content():
    assert Scenario().config_hash() == Scenario().config_hash()
    assert Scenario().config_hash() != dataclasses.replace(Scenario(), tbuf_elems=64).config_hash()


# ---- CLI ------------------------------------------------------------------------

SHORT = """seed = 1
duration_ns = 3000000
policy = {policy}
[traffic]
flow_count = 16
start_window_ns = 300000
aggregate_rate_bps = {rate}
"""


def write(tmp_path, policy="anaqm, red", rate=1_000_000_000, name="s.scn"):
    f = tmp_path / name
    f.write_text(SHORT.format(policy=policy, rate=rate))
    return f


def test_cli_run_writes_artifacts(tmp_path):
    f = write(tmp_path, "anaqm")
    out = tmp_path / "o"
    assert cli.main(["run", str(f), "--out", str(out), "--event-log", "--snapshot-interval", "1"]) == 0
    for name in ("summary.json", "counters.csv", "events.log", "snapshots.csv"):
        assert (out / "anaqm" / name).exists()
    summary = json.loads((out / "anaqm" / "summary.json").read_text())
    assert summary["audit"]["ok"] and summary["meta"]["policy"] == "anaqm"


def test_cli_compare_predicate_true(tmp_path):
    assert cli.main(["compare", str(write(tmp_path)), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "comparison.json").read_text())
    assert report["anaqm_beats_red"] is True
    assert len(set(report["arrival_hashes"].values())) == 1


def test_cli_config_error_exit_1(tmp_path, capsys):
    f = tmp_path / "bad.scn"
    f.write_text("[red]\nmax_p = 1.5\n")
    assert cli.main(["run", str(f), "--out", str(tmp_path)]) == 1
    assert "red.max_p" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.scn")]) == 1


def test_cli_compare_needs_two_policies(tmp_path):
    assert cli.main(["compare", str(write(tmp_path, "anaqm")), "--out", str(tmp_path)]) == 1


def test_cli_audit_failure_exit_2(tmp_path, monkeypatch):
    def broken(self, until=None):
        raise AuditError("injected")
    monkeypatch.setattr(cli.Simulator, "run", broken)
    out = tmp_path / "o"
    assert cli.main(["run", str(write(tmp_path, "red")), "--out", str(out)]) == 2
    assert json.loads((out / "red" / "summary.json").read_text())["error"] == "injected"


def test_cli_predicate_false_exit_3(tmp_path):
    # underloaded: neither policy loses EF, so anaqm cannot be strictly better
    f = write(tmp_path, rate=100_000_000)
    assert cli.main(["compare", str(f), "--out", str(tmp_path / "o")]) == 3


def test_identical_policy_twice_zero_deltas(tmp_path):
    s = load_scenario(write(tmp_path, "red"))
    a, b = cli.run_one(s, "red"), cli.run_one(s, "red")
    assert cli.dump_json(a) == cli.dump_json(b)
    report = cli.compare_summaries({"red": a, "red2": b})
    for cls, d in report["deltas"]["red-red2"].items():
        assert d["loss_rate"] in (0, 0.0, None) and d["mean_delay_ns"] in (0, 0.0, None)


def test_policy_order_does_not_matter(tmp_path):
    o1, o2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["compare", str(write(tmp_path, "anaqm, red, droptail", name="x.scn")), "--out", str(o1)]) == 0
    assert cli.main(["compare", str(write(tmp_path, "droptail, red, anaqm", name="y.scn")), "--out", str(o2)]) == 0
    for p in ("anaqm", "red", "droptail"):
        a = json.loads((o1 / p / "summary.json").read_text())
        b = json.loads((o2 / p / "summary.json").read_text())
        a["meta"].pop("config_hash"), b["meta"].pop("config_hash")
        assert a == b
    ra = json.loads((o1 / "comparison.json").read_text())
    rb = json.loads((o2 / "comparison.json").read_text())
    assert ra == rb


def test_parallel_jobs_match_serial(tmp_path):
    f = write(tmp_path)
    assert cli.main(["compare", str(f), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["compare", str(f), "--out", str(tmp_path / "p"), "--jobs", "2"]) == 0
    for p in ("anaqm", "red"):
        assert (tmp_path / "s" / p / "summary.json").read_bytes() == (tmp_path / "p" / p / "summary.json").read_bytes()
