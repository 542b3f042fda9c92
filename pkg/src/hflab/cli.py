"""Batch experiment runner.

Subcommands:

* ``hflab run <config.json> [--expect isomorphic] [--out DIR]`` load a
  config, flow the input connection, compare the limit against the graded
  object of the input, write monitors.csv / report.json / checkpoint.json.
* ``hflab jh <matrices.json>`` print the graded characters of a commuting
  family and exit.
* ``hflab resume <checkpoint.json> [--t-max T] [--out DIR]`` continue an
  interrupted run bit-compatibly.

Exit codes: 0 pipeline completed (the verdict itself does not affect the
code unless ``--expect`` is given, which returns 1 on a mismatch), 2 invalid
config or inputs, 3 flow failure, 4 I/O failure.  The environment variable
``HFLAB_OUT`` overrides the config output directory; ``--out`` beats both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .bundle import (
    ConnectionField,
    circle,
    complex_to_pairs,
    connection_from_json,
    connection_to_json,
    make_constant_connection,
    monodromy_family,
    pairs_to_complex,
    torus,
)
from .errors import (
    FlowFailure,
    HflabError,
    StructuralError,
    ValidationError,
)
from .flow import FlowConfig, energy, run_flow
from .jordan_holder import EXACT_TOLS, LIMIT_TOLS, RepFamily, graded
from .linalg import BackgroundMetric
from .verify import eta_trace, iso_check, projection_trace, second_fundamental_form

SCHEMA_VERSION = 1

_FLOW_KEYS = {
    "dt_init", "t_max", "tol_tension", "tol_energy_slope", "drift_budget",
    "integrator", "record_every", "min_time", "init_flatness_tol",
}


class ExperimentConfig:
    """Validated experiment description; ``echo`` keeps the raw document."""

    def __init__(self, doc):
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
        _check_keys(doc, "config", {
            "name", "base", "rank", "input", "metric", "flow",
            "diagnostics", "output_dir",
        }, required={"name", "base", "rank", "input"})

        self.name = doc["name"]
        if not isinstance(self.name, str) or not self.name:
            raise ValidationError("config.name must be a non-empty string")

        base = doc["base"]
        _require_obj(base, "config.base")
        kind = base.get("kind")
        if kind == "circle":
            _check_keys(base, "config.base", {"kind", "n"}, required={"kind", "n"})
            self.grid = circle(_int(base["n"], "config.base.n"))
        elif kind == "torus":
            _check_keys(base, "config.base", {"kind", "nx", "ny"},
                        required={"kind", "nx", "ny"})
            self.grid = torus(_int(base["nx"], "config.base.nx"),
                              _int(base["ny"], "config.base.ny"))
        else:
            raise ValidationError("config.base.kind must be 'circle' or 'torus'")

        self.rank = _int(doc["rank"], "config.rank")
        if not 1 <= self.rank <= 16:
            raise ValidationError("config.rank must be between 1 and 16")

        spec = doc["input"]
        _require_obj(spec, "config.input")
        _check_keys(spec, "config.input", {"constant", "path"})
        if ("constant" in spec) == ("path" in spec):
            raise ValidationError(
                "config.input needs exactly one of 'constant' or 'path'")
        if "constant" in spec:
            mats = spec["constant"]
            if not isinstance(mats, list) or len(mats) != self.grid.ndirs:
                raise ValidationError(
                    f"config.input.constant must list {self.grid.ndirs} "
                    "coefficient matrices")
            parsed = [_matrix(m, f"config.input.constant[{i}]", self.rank)
                      for i, m in enumerate(mats)]
            self.connection = make_constant_connection(self.grid, parsed)
        else:
            path = spec["path"]
            if not isinstance(path, str):
                raise ValidationError("config.input.path must be a string")
            with open(path) as fh:
                self.connection = connection_from_json(json.load(fh))
            if self.connection.grid != self.grid or self.connection.rank != self.rank:
                raise StructuralError(
                    "loaded connection does not match config.base/config.rank")

        metric_doc = doc.get("metric")
        if metric_doc is None:
            self.metric = BackgroundMetric.identity(self.rank)
        else:
            self.metric = BackgroundMetric(
                _matrix(metric_doc, "config.metric", self.rank))

        flow_doc = doc.get("flow") or {}
        _require_obj(flow_doc, "config.flow")
        _check_keys(flow_doc, "config.flow", _FLOW_KEYS)
        diag_doc = doc.get("diagnostics") or {}
        _require_obj(diag_doc, "config.diagnostics")
        _check_keys(diag_doc, "config.diagnostics",
                    {"track_gauge", "subbundle_basis"})
        self.track_gauge = bool(diag_doc.get("track_gauge", False))
        self.basis = None
        if diag_doc.get("subbundle_basis") is not None:
            self.basis = _columns(diag_doc["subbundle_basis"],
                                  "config.diagnostics.subbundle_basis",
                                  self.rank)
        try:
            self.flow = FlowConfig(track_gauge=self.track_gauge,
                                   keep_states=self.track_gauge, **flow_doc)
        except TypeError as exc:
            raise ValidationError(f"config.flow: {exc}") from exc

        self.output_dir = doc.get("output_dir")
        if self.output_dir is not None and not isinstance(self.output_dir, str):
            raise ValidationError("config.output_dir must be a string")
        self.echo = doc


def _require_obj(x, path):
    if not isinstance(x, dict):
        raise ValidationError(f"{path} must be a JSON object")


def _check_keys(d, path, allowed, required=()):
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ValidationError(f"{path}: missing keys {sorted(missing)}")


def _int(x, path):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ValidationError(f"{path} must be an integer")
    return x


def _matrix(obj, path, r):
    try:
        M = pairs_to_complex(obj, path)
    except ValidationError:
        raise
    if M.shape != (r, r):
        raise ValidationError(f"{path} must be {r}x{r} nested [re, im] pairs")
    return M


def _columns(obj, path, r):
    M = pairs_to_complex(obj, path)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2 or M.shape[0] != r or not 1 <= M.shape[1] <= r:
        raise ValidationError(f"{path} must be an {r}-row matrix of [re, im] pairs")
    return M


def _resolve_outdir(cli_out, exp):
    if cli_out:
        return cli_out
    env = os.environ.get("HFLAB_OUT")
    if env:
        return env
    if exp.output_dir:
        return exp.output_dir
    return os.path.join("hflab_out", exp.name)


def _predicted_limit_energy(graded_obj):
    total = 0.0
    for tup in graded_obj.characters:
        for lam in tup:
            total += float(np.log(abs(lam)) ** 2)
    return total


def _write_monitors(path, monitors, marker=None):
    exists = os.path.exists(path)
    with open(path, "a" if exists else "w") as fh:
        if marker is not None:
            fh.write(f"# {marker}\n")
        monitors.to_csv(fh, header=not exists)


def _execute(exp, out_dir, *, resume=None):
    """Flow, verify, persist.  Returns (report, exit-relevant verdict)."""
    wall0 = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)

    input_family = RepFamily(monodromy_family(exp.connection),
                             tol_comm=EXACT_TOLS.comm_tol)
    graded_input = graded(input_family, K=exp.metric, tols=EXACT_TOLS)

    if resume is None:
        result = run_flow(exp.connection, exp.metric, exp.flow)
    else:
        result = run_flow(resume["state"], exp.metric, exp.flow,
                          t0=resume["t"], dt0=resume["dt"],
                          sigma0=resume["sigma"],
                          coupling_reference=exp.connection)

    limit_family = RepFamily(monodromy_family(result.state.A),
                             tol_comm=LIMIT_TOLS.comm_tol)
    verdict = iso_check(limit_family, graded_input, tols=LIMIT_TOLS)

    diag = {
        "coupling_defect": result.stats.final_coupling_defect,
        "projection_trace_initial": None,
        "projection_trace_final": None,
        "beta_l2sq_initial": None,
        "beta_l2sq_final": None,
        "eta_intertwine_defect": None,
        "eta_range_invariance": None,
    }
    if exp.track_gauge and exp.basis is not None and result.trajectory:
        ptrace = projection_trace(result.trajectory, exp.basis, exp.metric)
        etrace = eta_trace(result.trajectory, exp.basis, exp.metric,
                           A0=exp.connection)
        _, beta0, _ = second_fundamental_form(exp.connection, exp.metric,
                                              exp.basis)
        _, beta1, _ = second_fundamental_form(result.state.A, exp.metric,
                                              exp.basis)
        diag.update({
            "projection_trace_initial": float(ptrace.dpi_l2sq[0]),
            "projection_trace_final": float(ptrace.dpi_l2sq[-1]),
            "beta_l2sq_initial": beta0,
            "beta_l2sq_final": beta1,
            "eta_intertwine_defect": etrace.eta_defect,
            "eta_range_invariance": etrace.eta_range_invariance,
        })

    note = None
    if result.termination == "t_max" and len(result.monitors) >= 8:
        sup = result.monitors.column("tension_sup")
        if sup[-1] > 0.5 * sup[(3 * len(sup)) // 4]:
            note = ("tension plateaued before t_max; possible oscillation; "
                    "verdict computed on the final iterate")

    monitors_path = os.path.join(out_dir, "monitors.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.json")
    report_path = os.path.join(out_dir, "report.json")

    marker = None
    if resume is not None:
        marker = f"resumed at t={resume['t']:.17g}"
    _write_monitors(monitors_path, result.monitors, marker=marker)

    sigma_doc = None
    if result.state.sigma is not None:
        sigma_doc = complex_to_pairs(result.state.sigma)
    checkpoint = {
        "schema_version": SCHEMA_VERSION,
        "t": result.state.t,
        "dt": result.state.dt,
        "connection": connection_to_json(result.state.A),
        "sigma": sigma_doc,
        "config": exp.echo,
    }
    with open(checkpoint_path, "w") as fh:
        json.dump(checkpoint, fh)

    report = {
        "schema_version": SCHEMA_VERSION,
        "name": exp.name,
        "config": exp.echo,
        "resume": None if resume is None else {
            "checkpoint": resume["path"], "t0": resume["t"]},
        "termination": result.termination,
        "note": note,
        "wall_time_s": time.perf_counter() - wall0,
        "final_energy": energy(result.state.A, exp.metric),
        "predicted_limit_energy": _predicted_limit_energy(graded_input),
        "graded_characters": graded_input.to_json_dict()["characters"],
        "limit_monodromy": [complex_to_pairs(G)
                            for G in limit_family.generators],
        "verdict": verdict.to_json_dict(),
        "diagnostics": diag,
        "steps": {"accepted": result.stats.n_accepted,
                  "rejected": result.stats.n_rejected},
        "files": {"monitors": "monitors.csv", "checkpoint": "checkpoint.json"},
    }
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1)
    return report


def cmd_run(args):
    with open(args.config) as fh:
        doc = json.load(fh)
    exp = ExperimentConfig(doc)
    out_dir = _resolve_outdir(args.out, exp)
    report = _execute(exp, out_dir)
    print(f"{exp.name}: {report['termination']}; "
          f"verdict {report['verdict']['verdict']}; "
          f"final energy {report['final_energy']:.6g}")
    if args.expect and report["verdict"]["verdict"] != args.expect:
        print(f"expected verdict {args.expect!r}, got "
              f"{report['verdict']['verdict']!r}", file=sys.stderr)
        return 1
    return 0


def _matrix_any(obj, name):
    """A square matrix given either as plain reals or as [re, im] pairs."""
    try:
        arr = np.asarray(obj, dtype=float)
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{name}: not a numeric matrix") from exc
    if arr.ndim == 2 and arr.shape[0] == arr.shape[1]:
        return arr.astype(complex)
    if arr.ndim == 3 and arr.shape[-1] == 2 and arr.shape[0] == arr.shape[1]:
        return pairs_to_complex(obj, name)
    raise ValidationError(f"{name}: expected a square matrix "
                          "(plain reals or nested [re, im] pairs)")


def cmd_jh(args):
    with open(args.matrices) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        _check_keys(doc, "input", {"matrices"}, required={"matrices"})
        mats = [_matrix_any(m, f"matrices[{i}]")
                for i, m in enumerate(doc["matrices"])]
    elif isinstance(doc, list):
        try:
            arr = np.asarray(doc, dtype=float)
        except (ValueError, TypeError) as exc:
            raise ValidationError("input is not numeric") from exc
        if arr.ndim == 2:
            mats = [_matrix_any(doc, "matrix")]
        elif arr.ndim == 3 and arr.shape[1] == arr.shape[2]:
            # list of plain real matrices (this wins the (2, 2, 2) tie;
            # wrap in {"matrices": [...]} to force the pairs reading)
            mats = [_matrix_any(m, f"matrices[{i}]") for i, m in enumerate(doc)]
        elif arr.ndim == 3 and arr.shape[-1] == 2:
            mats = [_matrix_any(doc, "matrix")]
        elif arr.ndim == 4 and arr.shape[-1] == 2:
            mats = [_matrix_any(m, f"matrices[{i}]") for i, m in enumerate(doc)]
        else:
            raise ValidationError(f"unrecognized matrix layout {arr.shape}")
    else:
        raise ValidationError("expected a matrix or a list of matrices")
    fam = RepFamily(mats, tol_comm=EXACT_TOLS.comm_tol)
    gr = graded(fam, tols=EXACT_TOLS)
    json.dump(gr.to_json_dict(), sys.stdout)
    sys.stdout.write("\n")
    return 0


def cmd_resume(args):
    with open(args.checkpoint) as fh:
        ck = json.load(fh)
    if not isinstance(ck, dict) or ck.get("schema_version") != SCHEMA_VERSION:
        raise ValidationError("unrecognized checkpoint document")
    _check_keys(ck, "checkpoint",
                {"schema_version", "t", "dt", "connection", "sigma", "config"},
                required={"schema_version", "t", "dt", "connection", "config"})
    exp = ExperimentConfig(ck["config"])
    if args.t_max is not None:
        doc = dict(exp.echo)
        doc["flow"] = dict(doc.get("flow") or {})
        doc["flow"]["t_max"] = args.t_max
        exp = ExperimentConfig(doc)
    state = connection_from_json(ck["connection"])
    if state.grid != exp.grid or state.rank != exp.rank:
        raise StructuralError("checkpoint connection does not match its config")
    sigma = None
    if ck.get("sigma") is not None:
        sigma = pairs_to_complex(ck["sigma"], "checkpoint.sigma")
        if sigma.shape != (*exp.grid.shape, exp.rank, exp.rank):
            raise StructuralError("checkpoint sigma has the wrong shape")
    out_dir = _resolve_outdir(args.out, exp)
    report = _execute(exp, out_dir, resume={
        "state": state, "t": float(ck["t"]), "dt": float(ck["dt"]),
        "sigma": sigma, "path": args.checkpoint,
    })
    print(f"{exp.name}: resumed; {report['termination']}; "
          f"verdict {report['verdict']['verdict']}")
    if args.expect and report["verdict"]["verdict"] != args.expect:
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hflab",
                                description="harmonic flow experiments on "
                                            "flat bundles")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("config")
    run.add_argument("--expect", choices=["isomorphic"], default=None)
    run.add_argument("--out", default=None)
    run.set_defaults(func=cmd_run)

    jh = sub.add_parser("jh", help="graded characters of a commuting family")
    jh.add_argument("matrices")
    jh.set_defaults(func=cmd_jh)

    res = sub.add_parser("resume", help="continue from a checkpoint")
    res.add_argument("checkpoint")
    res.add_argument("--t-max", type=float, default=None, dest="t_max")
    res.add_argument("--out", default=None)
    res.add_argument("--expect", choices=["isomorphic"], default=None)
    res.set_defaults(func=cmd_resume)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlowFailure as exc:
        print(f"flow failure: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, StructuralError, HflabError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"invalid JSON: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
