import json
import os
from fractions import Fraction

import app
from src.cli import EXIT_IDENTITY, EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, InputBundle, load_inputs, run
from src.models import CommandType, JobSpec, NumericalAbort, OutputFormat
from src.verify import SUITES, SuiteResult


def test_charnum_on_fixture(fixture_file):
    status, result = run(JobSpec(command=CommandType.CHARNUM, inputs=[fixture_file("two_divisor_bundle.json")]))
    assert status == EXIT_OK
    assert result["success"]
    assert result["report"]["char_report"].par_ch2 == Fraction(1, 6)
    assert result["report"]["cross_check"].direct == Fraction(1, 6)


def test_missing_input_file(fixture_file):
    status, result = run(JobSpec(command=CommandType.CHARNUM, inputs=[fixture_file("nope.json")]))
    assert status == EXIT_INVALID
    assert not result["success"]
    assert "missing file" in result["errors"][0]


def test_invalid_table_reports_every_error(tmp_path, bundle_doc):
    path = tmp_path / "bundle.json"
    path.write_text(json.dumps({**bundle_doc, "rank": 2}))
    status, result = run(JobSpec(command=CommandType.CHARNUM, inputs=[str(path)]))
    assert status == EXIT_INVALID
    assert len(result["errors"]) >= 3


def test_reports_are_written_and_stable(tmp_path, fixture_file):
    stem = str(tmp_path / "reports" / "charnum")
    spec = JobSpec(command=CommandType.CHARNUM, inputs=[fixture_file("two_divisor_bundle.json")], output=stem)
    run(spec)
    first = open(f"{stem}.json").read()
    run(spec)
    assert open(f"{stem}.json").read() == first
    assert json.loads(first)["report"]["char_report"]["par_ch2"] == "1/6"
    assert open(f"{stem}.txt").read().startswith("kms-hodge charnum")


def test_flow_rejected_by_stability_guard(fixture_file):
    spec = JobSpec(command=CommandType.FLOW, inputs=[fixture_file("flow.json")], grid=(16, 16), dt=10.0, steps=1)
    status, result = run(spec)
    assert status == EXIT_INVALID
    assert "stability guard" in result["error"]


def test_short_flow_writes_csv_trace(tmp_path, fixture_file):
    stem = str(tmp_path / "flow")
    spec = JobSpec(command=CommandType.FLOW, inputs=[fixture_file("flow.json")], grid=(16, 16), dt=1e-5,
                   steps=2, output=stem, output_format=OutputFormat.CSV)
    status, result = run(spec)
    assert status == EXIT_OK
    assert result["report"]["config"]["grid"] == "16x16"
    assert len(result["report"]["trace"]) == 3
    assert os.path.exists(f"{stem}_trace.csv")
    assert open(f"{stem}_trace.csv").readline().startswith("step,t,")


def test_verify_command():
    status, result = run(JobSpec(command=CommandType.VERIFY, suites=[3, 8], samples=2000))
    assert status == EXIT_OK
    assert result["report"]["passed"]


def test_local_system_transport(fixture_file):
    spec = JobSpec(command=CommandType.CORR,
                   inputs=[fixture_file("surface.json"), fixture_file("two_divisor_localsys.json")])
    status, result = run(spec)
    assert status == EXIT_OK
    assert result["report"]["flat_report"].par_ch2 == Fraction(1, 6)
    assert result["report"]["validation"] == []


def test_monodromy_transport(fixture_file):
    status, result = run(JobSpec(command=CommandType.CORR, inputs=[fixture_file("monodromy.json")]))
    assert status == EXIT_OK
    records = result["report"]["local_data"]
    assert len(records) == 3
    assert records[2]["weights"] == [Fraction(1, 4)]


def test_input_classification(fixture_file):
    bundle = load_inputs([fixture_file(name) for name in
                          ("surface.json", "two_divisor_localsys.json", "flow.json", "monodromy.json")])
    assert bundle.geometry["components"] == ["D1", "D2"]
    assert bundle.local_system is not None and bundle.flat is None
    assert bundle.flow["grid"] == "64x64"
    assert len(bundle.monodromy) == 3
    keyed = InputBundle()
    keyed.add({"monodromy": [{"M": [[1]], "weights": [0]}]}, "m.json")
    assert keyed.monodromy == [{"M": [[1]], "weights": [0]}]


def test_app_prints_report(capsys, fixture_file):
    assert app.main(["charnum", "-i", fixture_file("two_divisor_bundle.json")]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    assert printed["report"]["char_report"]["par_ch2"] == "1/6"


def test_app_rejects_bad_grid():
    assert app.main(["flow", "--grid", "4x4"]) == EXIT_INVALID


def test_verify_abort_maps_to_numerical_exit(monkeypatch):
    def abort(seed, samples):
        raise NumericalAbort("positivity lost at step 15")

    monkeypatch.setitem(SUITES, 8, abort)
    status, result = run(JobSpec(command=CommandType.VERIFY, suites=[3, 8], samples=2000))
    assert status == EXIT_NUMERICAL
    assert not result["success"]
    suites = result["report"]["verify"].suites
    assert suites[0].passed and not suites[1].passed
    assert result["errors"] == ["suite 8 (scalar_inequalities): 1/0 failed (NumericalAbort)"]


def test_failed_verify_suite_maps_to_identity_exit(monkeypatch):
    monkeypatch.setitem(SUITES, 8, lambda seed, samples: SuiteResult(
        suite=8, name="scalar_inequalities", passed=False, checked=1, failures=1))
    status, result = run(JobSpec(command=CommandType.VERIFY, suites=[8]))
    assert status == EXIT_IDENTITY
    assert not result["report"]["aborted"]
