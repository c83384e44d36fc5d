"""
Command-line driver: loads JSON inputs, runs one command pipeline and writes the reports
"""

import argparse
import json
import logging
import os
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import ValidationError

from .charnum import (
    char_report,
    graded_degrees,
    im_residual_by_divisor,
    par_ch2_cross_check,
    vanishing_check,
)
from .corrfun import MonodromyDatum, kms_table_transport, phi_local
from .env_config import EnvConfig, parse_grid
from .modelflow import (
    FlowConfig,
    epsilon_convergence,
    flow_checks,
    heat_flow,
    inequality_scan,
    inequality_sweep,
    log_s_bound_fit,
    perturbed_model,
    uniform_bound_margin,
    uniform_bound_scan,
)
from .models import (
    CommandType,
    FilteredLocalSystemData,
    FlowConfigError,
    IdentityCheckError,
    InvalidDataError,
    JobSpec,
    KmsError,
    NumericalAbort,
    OutputFormat,
    ParabolicFlatData,
)
from .pardata import require_valid, validate
from .perturb import (
    NilpotentBlockData,
    ch2_convergence,
    graded_semisimple_check,
    perturb_data,
    perturb_II,
    perturbed_blocks,
    refine,
)
from .serialization import dumps_report, text_report, to_jsonable, write_csv
from .speccalc import LogPolarGrid
from .verify import run_suites

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IDENTITY = 2
EXIT_NUMERICAL = 3


class InputBundle:
    """JSON inputs of one job, sorted by the kind of object each document describes"""

    def __init__(self):
        self.geometry: Optional[Dict[str, Any]] = None
        self.flat: Optional[Dict[str, Any]] = None
        self.local_system: Optional[Dict[str, Any]] = None
        self.blocks: Optional[Dict[str, Any]] = None
        self.flow: Optional[Dict[str, Any]] = None
        self.monodromy: Optional[List[Dict[str, Any]]] = None

    def add(self, document: Any, path: str) -> None:
        if isinstance(document, list):
            self.monodromy = document
        elif not isinstance(document, dict):
            raise InvalidDataError(f"{path}: expected a JSON object or list",
                                   [f"Field 'inputs' file {path} holds a {type(document).__name__}"])
        elif "components" in document:
            self.geometry = document
        elif "blocks" in document:
            self.blocks = document
        elif "divisor_spectra" in document and _carries_b(document):
            self.local_system = document
        elif "divisor_spectra" in document:
            self.flat = document
        elif "monodromy" in document:
            self.monodromy = document["monodromy"]
        else:
            self.flow = document

    def _with_geometry(self, document: Dict[str, Any]) -> Dict[str, Any]:
        if "geometry" not in document and self.geometry is not None:
            return {**document, "geometry": self.geometry}
        return document

    def flat_data(self) -> ParabolicFlatData:
        if self.flat is None:
            raise InvalidDataError("no bundle input given", ["Field 'inputs' needs a bundle.json document"])
        return ParabolicFlatData.model_validate(self._with_geometry(self.flat))

    def local_system_data(self) -> FilteredLocalSystemData:
        if self.local_system is None:
            raise InvalidDataError("no local system input given", ["Field 'inputs' needs a localsys.json document"])
        return FilteredLocalSystemData.model_validate(self._with_geometry(self.local_system))


def _carries_b(document: Dict[str, Any]) -> bool:
    """Local-system tables list (b, omega) entries, flat tables (a, alpha)"""
    spectra = document.get("divisor_spectra") or {}
    return any(isinstance(entry, dict) and "b" in entry for entries in spectra.values() for entry in entries)


def load_inputs(paths: List[str]) -> InputBundle:
    """Read and classify every input document"""
    missing = [f"Field 'inputs[{n}]' refers to missing file {p}" for n, p in enumerate(paths) if not os.path.exists(p)]
    if missing:
        raise InvalidDataError(missing[0], missing)
    bundle = InputBundle()
    for path in paths:
        with open(path, "r") as f:
            try:
                bundle.add(json.load(f), path)
            except json.JSONDecodeError as e:
                raise InvalidDataError(f"{path} is not valid JSON: {e}", [f"File {path}: line {e.lineno}, col {e.colno}"])
    return bundle


def _grid(spec: JobSpec) -> LogPolarGrid:
    n_rad, n_ang = spec.grid or EnvConfig.get_grid()
    return LogPolarGrid(n_rad=n_rad, n_ang=n_ang)


def run_charnum(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    """Characteristic numbers of a flat or local-system datum"""
    if inputs.flat is None and inputs.local_system is not None:
        data = inputs.local_system_data()
        require_valid(data)
        return {"char_report": char_report(data)}

    data = inputs.flat_data()
    require_valid(data)
    return {
        "char_report": char_report(data),
        "graded_degrees": graded_degrees(data),
        "im_residual_by_divisor": im_residual_by_divisor(data),
        "vanishing": vanishing_check(data),
        "cross_check": par_ch2_cross_check(data),
    }


def run_perturb(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    """Lattice perturbation of a flat datum for each m"""
    data = inputs.flat_data()
    require_valid(data)
    blocks = NilpotentBlockData.model_validate(inputs.blocks) if inputs.blocks else None
    refined = refine(data, blocks)
    plans = []
    for m in sorted(spec.m):
        plan = perturb_II(refined, m, data.truncation)
        perturbed = perturb_data(data, blocks, plan)
        plans.append({"plan": plan, "char_report": char_report(perturbed)})
    convergence = ch2_convergence(data, blocks, spec.m)
    return {
        "refined": refined,
        "plans": plans,
        "convergence": convergence,
        "graded_semisimple": graded_semisimple_check(perturbed_blocks(data, blocks)),
    }


def run_corr(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    """Transport a filtered local system, or local monodromies, to the flat side"""
    if inputs.monodromy is not None and inputs.local_system is None:
        records = []
        for n, item in enumerate(inputs.monodromy):
            datum = MonodromyDatum.model_validate(item)
            local = phi_local(datum, item.get("c", 0), item.get("lambda", 1))
            records.append({
                "index": n,
                "weights": local.weights,
                "residues": local.residues,
                "shifts": local.shifts,
                "spectrum": local.spectrum(),
            })
        return {"local_data": records}

    ls = inputs.local_system_data()
    raw = inputs.local_system
    flat = kms_table_transport(ls, raw.get("lambda", 1), raw.get("truncation"))
    ls_report = char_report(ls)
    flat_report = char_report(flat)
    agree = (ls_report.c1_coeffs == flat_report.c1_coeffs and ls_report.par_ch2 == flat_report.par_ch2)
    if not agree:
        raise IdentityCheckError(
            f"transport changed par_ch2 from {ls_report.par_ch2} to {flat_report.par_ch2}"
        )
    return {
        "flat_data": flat.model_dump(by_alias=True),
        "local_system_report": ls_report,
        "flat_report": flat_report,
        "validation": validate(flat),
    }


def run_flow(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    """Heat flow from the perturbed model metric"""
    document = dict(inputs.flow or {})
    if spec.dt is not None:
        document["dt"] = spec.dt
    if spec.steps is not None:
        document["steps"] = spec.steps
    if spec.grid is not None:
        document["grid"] = "x".join(str(n) for n in spec.grid)
    try:
        config = FlowConfig.model_validate(document)
    except ValidationError as e:
        raise FlowConfigError(f"flow configuration rejected: {_first_message(e)}")
    conn, initial = perturbed_model(config.grid, config.lam, config.eps, config.amplitude, config.seed, config.rank)
    state = heat_flow(config, initial, conn)
    return {
        "config": config.model_dump(exclude={"grid"}) | {"grid": f"{config.grid.n_rad}x{config.grid.n_ang}"},
        "t": state.t,
        "checks": flow_checks(state, slack=spec.tol),
        "log_s_fit": log_s_bound_fit(state),
        "trace": state.trace_frame(),
    }


def run_scan(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    """Scalar inequality scan and the eps-family tables"""
    grid = _grid(spec)
    uniform = uniform_bound_scan(spec.eps, grid)
    return {
        "inequalities": inequality_scan(spec.samples, spec.seed),
        "inequality_sweep": inequality_sweep(),
        "uniform_bound": uniform,
        "uniform_bound_margin": uniform_bound_margin(uniform, max(spec.eps)),
        "epsilon_convergence": epsilon_convergence(spec.eps, grid),
    }


def run_verify(spec: JobSpec, inputs: InputBundle) -> Dict[str, Any]:
    report = run_suites(seed=spec.seed, full=spec.full, samples=spec.samples, only=spec.suites or None)
    return {"passed": report.passed, "aborted": report.aborted, "verify": report}


PIPELINES: Dict[CommandType, Callable[[JobSpec, InputBundle], Dict[str, Any]]] = {
    CommandType.CHARNUM: run_charnum,
    CommandType.PERTURB: run_perturb,
    CommandType.CORR: run_corr,
    CommandType.FLOW: run_flow,
    CommandType.SCAN: run_scan,
    CommandType.VERIFY: run_verify,
}


def _first_message(e: ValidationError) -> str:
    error = e.errors()[0]
    location = ".".join(str(part) for part in error.get("loc", ()))
    return f"Field '{location}': {error.get('msg')}" if location else str(error.get("msg"))


def _validation_messages(e: ValidationError) -> List[str]:
    messages = []
    for error in e.errors():
        location = ".".join(str(part) for part in error.get("loc", ()))
        messages.append(f"Field '{location}': {error.get('msg')}")
    return messages


def run(spec: JobSpec) -> Tuple[int, Dict[str, Any]]:
    """
    Execute one job and write its reports.

    Args:
        spec: the job; `output` is a path stem for the report files

    Returns:
        (exit status, result dictionary); the dictionary carries success, error and errors
    """
    logger.info(f"Running {spec.command.value} on {len(spec.inputs)} input(s)")
    try:
        inputs = load_inputs(spec.inputs)
        report = PIPELINES[spec.command](spec, inputs)
        if report.get("passed", True):
            status = EXIT_OK
        else:
            status = EXIT_NUMERICAL if report.get("aborted") else EXIT_IDENTITY
        result = {"success": status == EXIT_OK, "command": spec.command.value, "report": report}
        if status != EXIT_OK:
            result["error"] = "verify suites failed"
            result["errors"] = [
                f"suite {s.suite} ({s.name}): {s.failures}/{s.checked} failed" + (f" ({s.error})" if s.error else "")
                for s in report["verify"].suites if not s.passed
            ]
    except NumericalAbort as e:
        status = EXIT_NUMERICAL
        result = _failure(spec, e, [str(e)])
        if e.state is not None:
            result["last_state"] = {"t": e.state.t, "trace": e.state.trace_frame()}
    except IdentityCheckError as e:
        status = EXIT_IDENTITY
        result = _failure(spec, e, [str(e)])
    except ValidationError as e:
        status = EXIT_INVALID
        result = _failure(spec, e, _validation_messages(e))
    except InvalidDataError as e:
        status = EXIT_INVALID
        result = _failure(spec, e, e.errors or [str(e)])
    except (FlowConfigError, KmsError, ValueError) as e:
        status = EXIT_INVALID
        result = _failure(spec, e, [str(e)])

    if status != EXIT_OK:
        logger.error(f"{spec.command.value} failed with exit status {status}: {result.get('error')}")
    if spec.output:
        write_reports(spec, result)
    return status, result


def _failure(spec: JobSpec, e: Exception, errors: List[str]) -> Dict[str, Any]:
    message = _first_message(e) if isinstance(e, ValidationError) else str(e)
    return {"success": False, "command": spec.command.value, "error": message, "errors": errors}


def _tables(result: Dict[str, Any]) -> Dict[str, pd.DataFrame]:
    report = result.get("report", {})
    tables = {name: value for name, value in report.items() if isinstance(value, pd.DataFrame)}
    convergence = report.get("convergence")
    if isinstance(convergence, dict) and isinstance(convergence.get("table"), pd.DataFrame):
        tables["convergence"] = convergence["table"]
    return tables


def render(spec: JobSpec, result: Dict[str, Any]) -> str:
    """Report text in the requested format (CSV falls back to JSON on stdout)"""
    if spec.output_format == OutputFormat.TEXT:
        return text_report(result, title=f"kms-hodge {spec.command.value}")
    return dumps_report(result)


def write_reports(spec: JobSpec, result: Dict[str, Any]) -> List[str]:
    """
    Write <output>.json and <output>.txt, plus <output>_<table>.csv per table with csv format.

    Returns:
        Paths written
    """
    stem, ext = os.path.splitext(spec.output)
    if ext.lower() not in (".json", ".txt", ".csv"):
        stem = spec.output
    directory = os.path.dirname(stem)
    if directory:
        os.makedirs(directory, exist_ok=True)

    written = []
    with open(f"{stem}.json", "w") as f:
        f.write(dumps_report(result))
    written.append(f"{stem}.json")
    with open(f"{stem}.txt", "w") as f:
        f.write(text_report(result, title=f"kms-hodge {spec.command.value}"))
    written.append(f"{stem}.txt")
    if spec.output_format == OutputFormat.CSV:
        for name, frame in _tables(result).items():
            written.append(write_csv(frame.map(_csv_cell), f"{stem}_{name}.csv"))
    logger.info(f"Reports written: {', '.join(written)}")
    return written


def _csv_cell(value: Any) -> Any:
    converted = to_jsonable(value)
    return json.dumps(converted) if isinstance(converted, (dict, list)) else converted


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kms-hodge",
        description="Parabolic characteristic numbers, the local-system correspondence and the model heat flow",
    )
    parser.add_argument("command", choices=[c.value for c in CommandType])
    parser.add_argument("--input", "-i", action="append", default=[], help="input JSON file (repeatable)")
    parser.add_argument("--output", "-o", help="report path stem; writes <stem>.json and <stem>.txt")
    parser.add_argument("--grid", help="grid size NxM (radial x angular)")
    parser.add_argument("--eps", type=_float_list, help="comma-separated eps list")
    parser.add_argument("--m", type=_int_list, help="comma-separated lattice sizes m")
    parser.add_argument("--dt", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--tol", type=float, help="per-step slack of the Donaldson monotonicity check")
    parser.add_argument("--samples", type=int, help="samples of the scalar inequality scan")
    parser.add_argument("--format", choices=[f.value for f in OutputFormat])
    parser.add_argument("--suite", type=int, action="append", default=[], help="verify suite number (repeatable)")
    parser.add_argument("--full", action="store_true", help="verify: add the grid-scale suites")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return parser


def job_from_args(args: argparse.Namespace) -> JobSpec:
    """JobSpec from parsed flags, with environment defaults for anything not given"""
    fields: Dict[str, Any] = {
        "command": args.command,
        "inputs": args.input,
        "output": args.output,
        "output_format": args.format or EnvConfig.validate_config()["output_format"],
        "seed": args.seed if args.seed is not None else EnvConfig.get_seed(),
        "full": args.full,
        "suites": args.suite,
    }
    if args.grid:
        fields["grid"] = parse_grid(args.grid)
    for name in ("eps", "m", "dt", "steps", "tol", "samples"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    return JobSpec(**fields)


def execute(args: argparse.Namespace) -> int:
    """Run the job described by parsed flags; prints the report when no output path is given"""
    try:
        spec = job_from_args(args)
    except ValueError as e:
        logger.error(f"Invalid options: {e}")
        return EXIT_INVALID
    status, result = run(spec)
    if not spec.output:
        print(render(spec, result))
    return status
