import json

import pytest

from abstain_decode import records as rio
from abstain_decode.cli import main
from abstain_decode.testbed import TestbedRecord, expand_eval

from conftest import FakeModelServer


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def quadrant(tmp_path_factory):
    d = tmp_path_factory.mktemp("quadrant")
    assert run("make-world", "--kind", "quadrant", "--size", 6, "--world", d / "world.json", "--data", d / "tb.jsonl") == 0
    return d


@pytest.fixture(scope="module")
def raw_world(tmp_path_factory):
    d = tmp_path_factory.mktemp("raw")
    assert run("make-world", "--kind", "testbed", "--world", d / "world.json", "--data", d / "qa.jsonl") == 0
    return d


def build(d, out, seed=0):
    return run("build-testbed", "--input", d / "qa.jsonl", "--out", out, "--backend", f"mock:{d / 'world.json'}",
               "--seed", seed, "--max-tokens", 4)


def test_build_testbed_deterministic(raw_world, tmp_path):
    assert build(raw_world, tmp_path / "a.jsonl") == 0
    assert build(raw_world, tmp_path / "b.jsonl") == 0
    assert rio.file_sha256(tmp_path / "a.jsonl") == rio.file_sha256(tmp_path / "b.jsonl")
    head, rows = rio.read_records(tmp_path / "a.jsonl")
    ps = [r["p"] for r in rows]
    assert ps.count(0) == ps.count(1) > 0
    _, stages = rio.read_records(tmp_path / "a.jsonl.attrition.jsonl")
    assert [s["stage"] for s in stages][0] == "dropped_at_ingestion"
    assert stages[-1] == {"stage": "balanced", "count": len(rows)}


def test_build_testbed_missing_input(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert run("build-testbed", "--input", missing, "--out", tmp_path / "o.jsonl", "--backend", "mock:x") == 1
    assert str(missing) in capsys.readouterr().err


def test_build_testbed_empty(raw_world, tmp_path, capsys):
    assert build(raw_world, tmp_path / "o.jsonl") == 0
    qa = tmp_path / "eval_only.jsonl"
    _, rows = rio.read_records(raw_world / "qa.jsonl")
    rio.write_records(qa, None, [r for r in rows if r["split"] == "eval"])
    code = run("build-testbed", "--input", qa, "--out", tmp_path / "e.jsonl",
               "--backend", f"mock:{raw_world / 'world.json'}", "--max-tokens", 4)
    assert code == 1
    assert "irrelevant_context" in capsys.readouterr().err
    assert (tmp_path / "e.jsonl.attrition.jsonl").is_file()


def decode(d, out, strategy, *extra):
    return run("decode", "--testbed", d / "tb.jsonl", "--out", out, "--strategy", strategy,
               "--backend", f"mock:{d / 'world.json'}", *extra)


def _instances(d):
    _, rows = rio.read_records(d / "tb.jsonl")
    return {i.id: i for i in expand_eval(TestbedRecord.from_dict(r) for r in rows)}


def test_cdam_abstains_exactly_on_unanswerable(quadrant, tmp_path):
    assert decode(quadrant, tmp_path / "p.jsonl", "cda-m", "--alpha", 0.7) == 0
    insts = _instances(quadrant)
    _, rows = rio.read_records(tmp_path / "p.jsonl")
    assert len(rows) == len(insts)
    for r in rows:
        assert r["abstained"] is (not insts[r["id"]].answerable)


def test_context_never_abstains_without_phrase(quadrant, tmp_path):
    assert decode(quadrant, tmp_path / "p.jsonl", "context") == 0
    from abstain_decode.judge import is_abstention

    _, rows = rio.read_records(tmp_path / "p.jsonl")
    for r in rows:
        assert r["abstained"] is is_abstention(r["text"])
        assert r["inference_calls"] == r["steps"]


def test_zero_max_tokens(quadrant, tmp_path):
    assert decode(quadrant, tmp_path / "p.jsonl", "cda", "--max-tokens", 0) == 1


def test_unknown_backend_spec(quadrant, tmp_path, monkeypatch):
    monkeypatch.delenv("ABSTAIN_DECODE_BACKEND", raising=False)
    assert run("decode", "--testbed", quadrant / "tb.jsonl", "--out", tmp_path / "p.jsonl") == 1
    assert decode(quadrant, tmp_path / "p.jsonl", "cda").__class__ is int
    assert run("decode", "--testbed", quadrant / "tb.jsonl", "--out", tmp_path / "p.jsonl",
               "--backend", "gpu:0") == 1


def test_env_backend(quadrant, tmp_path, monkeypatch):
    monkeypatch.setenv("ABSTAIN_DECODE_BACKEND", f"mock:{quadrant / 'world.json'}")
    assert run("decode", "--testbed", quadrant / "tb.jsonl", "--out", tmp_path / "p.jsonl", "--limit", 2) == 0
    assert len(rio.read_records(tmp_path / "p.jsonl")[1]) == 2


def test_jobs_do_not_change_output(quadrant, tmp_path):
    assert decode(quadrant, tmp_path / "a.jsonl", "cda-m", "--jobs", 1) == 0
    assert decode(quadrant, tmp_path / "b.jsonl", "cda-m", "--jobs", 4) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


HAND_TESTBED = [
    TestbedRecord("r0", "q0", "pos gold0", "neg", "gold0", 0),
    TestbedRecord("r1", "q1", "pos gold1", "neg", "gold1", 0),
    TestbedRecord("r2", "q2", "pos gold2", "neg", "gold2", 0),
    TestbedRecord("r3", "q3", "pos gold3", "neg", "gold3", 1),
]
# three N1, one N2, one N3, one N4, two N5
HAND_PREDICTIONS = [
    {"id": "r0:pos", "text": "gold0", "abstained": False},
    {"id": "r1:pos", "text": "it is gold1.", "abstained": False},
    {"id": "r2:pos", "text": "Gold2", "abstained": False},
    {"id": "r3:pos", "text": "wrong", "abstained": False},
    {"id": "r3:neg", "text": "unknown", "abstained": True},
    {"id": "r0:neg", "text": "a guess", "abstained": False},
    {"id": "r1:neg", "text": "I don't know", "abstained": False},
    {"id": "r2:neg", "text": "unknown", "abstained": True},
]


@pytest.fixture
def hand(tmp_path):
    rio.write_records(tmp_path / "tb.jsonl", rio.header("testbed", {}, 0), (r.to_dict() for r in HAND_TESTBED))
    rio.write_records(tmp_path / "pred.jsonl", rio.header("predictions", {"strategy": {"strategy": "cda"}}, 0),
                      HAND_PREDICTIONS)
    return tmp_path


def test_evaluate_hand_case(hand, capsys):
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "pred.jsonl",
               "--out", hand / "r1.jsonl") == 0
    _, (report,) = rio.read_records(hand / "r1.jsonl")
    assert report["counts"] == [3, 1, 1, 1, 2]
    assert report["rs"] == 0.609375 and report["acc"] == 0.375 and report["cov"] == 0.75
    assert report["f1_ans"] == 0.6 and report["f1_abs"] == round(2 / 3, 6)
    assert "60.94" in capsys.readouterr().out
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "pred.jsonl",
               "--out", hand / "r2.jsonl") == 0
    assert (hand / "r1.jsonl").read_bytes() == (hand / "r2.jsonl").read_bytes()


def test_evaluate_aggregates_runs(hand):
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "pred.jsonl",
               hand / "pred.jsonl", "--out", hand / "r.jsonl") == 0
    _, rows = rio.read_records(hand / "r.jsonl")
    assert [r["type"] for r in rows] == ["report", "report", "aggregate"]
    assert rows[-1]["rs_mean"] == 0.609375 and rows[-1]["rs_std"] == 0


def test_evaluate_empty(hand):
    rio.write_records(hand / "empty.jsonl", rio.header("predictions", {}, 0), [])
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "empty.jsonl") == 1


def test_evaluate_orphans(hand, capsys):
    rows = HAND_PREDICTIONS[:-1] + [{"id": "ghost:pos", "text": "x", "abstained": False}]
    rio.write_records(hand / "bad.jsonl", None, rows)
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "bad.jsonl") == 1
    err = capsys.readouterr().err
    assert "ghost:pos" in err and "r2:neg" in err


def test_tune_threshold_and_entropy_decode(quadrant, tmp_path):
    assert decode(quadrant, tmp_path / "p.jsonl", "context", "--trace-out", tmp_path / "t.jsonl") == 0
    assert run("tune-threshold", "--testbed", quadrant / "tb.jsonl", "--predictions", tmp_path / "p.jsonl",
               "--traces", tmp_path / "t.jsonl", "--out", tmp_path / "thr.jsonl") == 0
    _, rows = rio.read_records(tmp_path / "thr.jsonl")
    assert [r["variant"] for r in rows] == ["first", "average", "max", "min"]
    assert decode(quadrant, tmp_path / "e.jsonl", "entropy", "--threshold-file", tmp_path / "thr.jsonl",
                  "--entropy-variant", "max") == 0


def test_tune_threshold_empty(hand):
    rio.write_records(hand / "t.jsonl", None, [])
    assert run("tune-threshold", "--testbed", hand / "tb.jsonl", "--predictions", hand / "pred.jsonl",
               "--traces", hand / "t.jsonl", "--out", hand / "thr.jsonl") == 1


def test_every_output_has_header(quadrant, raw_world, hand):
    out = hand / "outputs"
    out.mkdir()
    assert build(raw_world, out / "tb.jsonl") == 0
    assert decode(quadrant, out / "p.jsonl", "cda", "--trace-out", out / "t.jsonl", "--limit", 3) == 0
    assert run("evaluate", "--testbed", hand / "tb.jsonl", "--predictions", hand / "pred.jsonl",
               "--out", out / "r.jsonl") == 0
    assert decode(quadrant, out / "c.jsonl", "context", "--trace-out", out / "ct.jsonl", "--limit", 4) == 0
    assert run("tune-threshold", "--testbed", quadrant / "tb.jsonl", "--predictions", out / "c.jsonl",
               "--traces", out / "ct.jsonl", "--out", out / "thr.jsonl") == 1  # ids do not cover the testbed
    for name in ("tb.jsonl", "tb.jsonl.attrition.jsonl", "p.jsonl", "t.jsonl", "r.jsonl"):
        first = json.loads((out / name).read_text().splitlines()[0])
        assert first["type"] == "header" and len(first["config_hash"]) == 16, name
    _, traces = rio.read_records(out / "t.jsonl")
    assert {"id", "step", "token", "weights", "r_p", "r_c", "is_eos"} <= set(traces[0])


def test_remote_failure_then_resume(quadrant, tmp_path):
    tb = quadrant / "tb.jsonl"
    n = len(rio.read_records(tb)[1]) * 2
    with FakeModelServer(fail_after=10) as server:
        args = ["decode", "--testbed", tb, "--strategy", "context", "--max-tokens", 3,
                "--backend", f"remote:{server.url}"]
        assert run(*args, "--out", tmp_path / "p.jsonl") == 2
        partial = tmp_path / "p.jsonl.partial"
        head, done = rio.read_records(partial)
        assert head["type"] == "header" and 0 < len(done) < n
        assert not (tmp_path / "p.jsonl").exists()

        server.fail_after = None
        assert run(*args, "--out", tmp_path / "p.jsonl", "--resume") == 0
        assert not partial.exists()
        assert run(*args, "--out", tmp_path / "clean.jsonl") == 0
    assert (tmp_path / "p.jsonl").read_bytes() == (tmp_path / "clean.jsonl").read_bytes()


def test_resume_refuses_other_config(quadrant, tmp_path):
    out = tmp_path / "p.jsonl"
    rio.write_records(tmp_path / "p.jsonl.partial", rio.header("predictions", {"other": 1}, 0), [])
    assert decode(quadrant, out, "cda", "--resume") == 1


def test_bad_arguments_exit_one(capsys):
    assert run("decode") == 1
    assert run("no-such-command") == 1
    assert run("--help") == 0
    assert "build-testbed" in capsys.readouterr().out
