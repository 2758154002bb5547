"""Command-line interface: ``setmerge merge | simulate | mt-synth``.

Exit codes: 0 on success, 2 for unreadable input, schema violations and
bad flags, 3 for requests that parse but cannot be honoured (sets outside
the candidate space, an independence-only rule without the independence
assertion, and so on).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings

import jsonschema

from .aggregate import UnknownRuleError, get_aggregator
from .extensions import POINT_MASS_ONE, UNIF_TAIL, RejectionSetInput, synth_mt_matrix
from .merge import HeuristicRuleWarning, IndependenceNotAsserted, MergeConfig, merge
from .sets import Continuous, Discrete, IntervalSet, LabelSet, StudyInput, canonicalize

EXIT_OK, EXIT_PARSE, EXIT_INVALID = 0, 2, 3

_LEVEL = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_LABEL = {"type": ["string", "integer", "number"]}

MERGE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["space", "studies", "method", "alpha"],
    "additionalProperties": False,
    "properties": {
        "space": {
            "oneOf": [
                {"type": "object", "required": ["kind", "lo", "hi"], "additionalProperties": False,
                 "properties": {"kind": {"const": "continuous"}, "lo": {"type": "number"},
                                "hi": {"type": "number"}}},
                {"type": "object", "required": ["kind", "labels"], "additionalProperties": False,
                 "properties": {"kind": {"const": "discrete"},
                                "labels": {"type": "array", "minItems": 1, "uniqueItems": True,
                                           "items": _LABEL}}},
            ]
        },
        "studies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {"type": "object", "required": ["alpha", "intervals"], "additionalProperties": False,
                     "properties": {"alpha": _LEVEL,
                                    "intervals": {"type": "array",
                                                  "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                                            "items": {"type": "number"}}}}},
                    {"type": "object", "required": ["alpha", "labels"], "additionalProperties": False,
                     "properties": {"alpha": _LEVEL,
                                    "labels": {"type": "array", "uniqueItems": True, "items": _LABEL}}},
                ]
            },
        },
        "method": {"type": "string", "minLength": 1},
        "alpha": _LEVEL,
        "tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "mode": {"enum": ["p", "e"]},
        "seed": {"type": "integer", "minimum": 0},
        "independent": {"type": "boolean"},
    },
}

MT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["m", "studies"],
    "additionalProperties": False,
    "properties": {
        "m": {"type": "integer", "minimum": 1},
        "studies": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["alpha", "rejected"], "additionalProperties": False,
                      "properties": {"alpha": _LEVEL,
                                     "rejected": {"type": "array", "uniqueItems": True,
                                                  "items": {"type": "integer", "minimum": 0}}}},
        },
        "variant": {"enum": [UNIF_TAIL, POINT_MASS_ONE]},
        "seed": {"type": "integer", "minimum": 0},
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# JSON with 17 significant digits
# ---------------------------------------------------------------------------

def _num(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError("non-finite number in output")
    return format(x, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Serialize to JSON, writing every float with 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, str, bool)) or v is None for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if hasattr(obj, "item"):  # numpy scalar
        return dumps(obj.item(), indent, _level)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# input handling
# ---------------------------------------------------------------------------

def _read_json(path: str, schema: dict):
    try:
        if path == "-":
            text = sys.stdin.read()
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_PARSE, f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "(top level)"
            lines.append(f"{path}: field {where}: {e.message}")
        raise CliError(EXIT_PARSE, "\n".join(lines))
    return doc


def _label(v):
    # JSON numbers that are whole stay ints so 1 and 1.0 name the same label
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def build_request(doc: dict, overrides: dict | None = None):
    """Turn a validated request document into ``(space, studies, config)``."""
    doc = dict(doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    sp = doc["space"]
    if sp["kind"] == "continuous":
        try:
            space = Continuous(float(sp["lo"]), float(sp["hi"]))
        except ValueError as exc:
            raise CliError(EXIT_INVALID, f"space: {exc}") from exc
    else:
        space = Discrete(tuple(_label(v) for v in sp["labels"]))
    studies = []
    for i, s in enumerate(doc["studies"]):
        if isinstance(space, Continuous):
            if "intervals" not in s:
                raise CliError(EXIT_INVALID, f"studies/{i}: a continuous space needs 'intervals'")
            for j, (a, b) in enumerate(s["intervals"]):
                if not a <= b:
                    raise CliError(EXIT_INVALID, f"studies/{i}/intervals/{j}: left end {a} exceeds right end {b}")
                if a < space.lo or b > space.hi:
                    raise CliError(EXIT_INVALID,
                                   f"studies/{i}/intervals/{j}: [{a}, {b}] lies outside [{space.lo}, {space.hi}]")
            study_set = canonicalize([(float(a), float(b)) for a, b in s["intervals"]])
        else:
            if "labels" not in s:
                raise CliError(EXIT_INVALID, f"studies/{i}: a discrete space needs 'labels'")
            labels = [_label(v) for v in s["labels"]]
            stray = [v for v in labels if v not in set(space.labels)]
            if stray:
                raise CliError(EXIT_INVALID, f"studies/{i}/labels: {stray} not in the candidate space")
            study_set = LabelSet(labels)
        studies.append(StudyInput(study_set, float(s["alpha"])))
    try:
        agg = get_aggregator(doc["method"])
    except UnknownRuleError as exc:
        raise CliError(EXIT_INVALID, f"method: {exc.args[0]}") from exc
    mode = doc.get("mode")
    if mode is not None and mode != agg.kind:
        raise CliError(EXIT_INVALID, f"mode: method {doc['method']!r} works on {agg.kind}-values, not {mode}-values")
    try:
        config = MergeConfig(agg, alpha=float(doc["alpha"]), tau=float(doc.get("tau", 1.0)),
                             seed=int(doc.get("seed", 0)), independent=bool(doc.get("independent", False)))
        agg.check_width(len(studies))
    except ValueError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    return space, studies, config


def report_to_dict(report, space) -> dict:
    cells = []
    for c in report.cells:
        cell = c.cell
        if isinstance(space, Continuous):
            region = [[float(a), float(b)] for a, b in cell.region.pairs]
            rep = float(cell.representative)
        else:
            region = cell.region.ordered(space)
            rep = cell.representative
        cells.append({"region": region, "signature": cell.bits(), "representative": rep,
                      "statistic": float(c.statistic), "kept": bool(c.kept)})
    merged = report.merged
    if isinstance(merged, IntervalSet):
        out = [[float(a), float(b)] for a, b in merged.pairs]
    else:
        out = merged.ordered(space)
    return {"merged": out, "measure": float(report.measure), "cells": cells, "config": report.config.echo()}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def cmd_merge(args) -> int:
    doc = _read_json(args.inp, MERGE_SCHEMA)
    overrides = {"alpha": args.alpha, "tau": args.tau, "mode": args.mode, "seed": args.seed}
    if overrides["alpha"] is not None and not 0 < overrides["alpha"] < 1:
        raise CliError(EXIT_PARSE, "--alpha must lie in (0, 1)")
    space, studies, config = build_request(doc, overrides)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", HeuristicRuleWarning)
        try:
            report = merge(space, studies, config)
        except IndependenceNotAsserted as exc:
            raise CliError(EXIT_INVALID,
                           f"method {config.aggregator.name!r} is only valid for independent studies; "
                           "add \"independent\": true to the request to assert independence") from exc
        except ValueError as exc:
            raise CliError(EXIT_INVALID, str(exc)) from exc
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _write(dumps(report_to_dict(report, space)) + "\n", args.out)
    return EXIT_OK


def cmd_mt_synth(args) -> int:
    doc = _read_json(args.inp, MT_SCHEMA)
    m = doc["m"]
    variant = doc.get("variant", UNIF_TAIL)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    studies = []
    for i, s in enumerate(doc["studies"]):
        bad = [j for j in s["rejected"] if j >= m]
        if bad:
            raise CliError(EXIT_INVALID, f"studies/{i}/rejected: indices {bad} are not below m={m}")
        studies.append(RejectionSetInput(m, frozenset(s["rejected"]), float(s["alpha"])))
    p = synth_mt_matrix(studies, "p", variant, seed=seed)
    e = synth_mt_matrix(studies, "e")
    out = {"m": m, "variant": variant, "seed": seed,
           "p": [[float(v) for v in row] for row in p],
           "e": [[float(v) for v in row] for row in e]}
    _write(dumps(out) + "\n", args.out)
    return EXIT_OK


def _methods(text):
    if text is None:
        return None
    ids = tuple(t.strip() for t in text.split(",") if t.strip())
    if not ids:
        raise CliError(EXIT_PARSE, "--methods needs at least one id")
    return ids


def cmd_simulate(args) -> int:
    from .simlab import ScenarioConfig, run_normal_mean, run_sensitivity, run_size_trend
    from .simlab.conformal import ConformalDesign, run_conformal_dependent

    kind = args.experiment
    default_reps = {"normal": 5000, "conformal": 2000, "sensitivity": 200, "trend": 2000}[kind]
    default_scenario = {"normal": "S1", "conformal": "S1", "sensitivity": "S2", "trend": "S2"}[kind]
    try:
        cfg = ScenarioConfig(
            scenario=args.scenario or default_scenario,
            replications=args.reps if args.reps is not None else default_reps,
            seed=args.seed if args.seed is not None else 0,
            methods=_methods(args.methods),
            L=4 if kind == "conformal" else 5,
            am_tau=args.tau if args.tau is not None else 0.5,
        )
        if kind == "normal":
            res = run_normal_mean(cfg)
        elif kind == "conformal":
            res = run_conformal_dependent(cfg, ConformalDesign(variant=args.variant))
        elif kind == "sensitivity":
            res = run_sensitivity(cfg, repeats_inner=args.inner)
        else:
            offsets = tuple(float(v) for v in args.offsets.split(","))
            method = _methods(args.methods)[0] if args.methods else "fisher"
            res = run_size_trend(cfg.resolved((method,)), offsets=offsets, method=method)
    except (ValueError, UnknownRuleError) as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    for f in getattr(res, "flags", []):
        print(f"flag: {f.scenario} grid={f.grid_value:g} {f.method}: {f.reason} "
              f"(coverage floor {f.floor:.4f})", file=sys.stderr)
    _write(res.to_csv(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setmerge", description="Merge uncertainty sets by test inversion.")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge the sets described in a JSON request")
    m.add_argument("--in", dest="inp", required=True, help="request file, or - for stdin")
    m.add_argument("--out", help="output file (default stdout)")
    m.add_argument("--seed", type=int, help="override the request seed")
    m.add_argument("--alpha", type=float, help="override the target level")
    m.add_argument("--tau", type=float, help="override the e-merge adjustment factor")
    m.add_argument("--mode", choices=["p", "e"], help="require the method to work on p- or e-values")
    m.set_defaults(func=cmd_merge)

    s = sub.add_parser("simulate", help="run a simulation experiment and write CSV")
    s.add_argument("experiment", choices=["normal", "conformal", "sensitivity", "trend"])
    s.add_argument("--scenario", choices=["S1", "S2", "S3", "S4"])
    s.add_argument("--reps", type=int, help="replications (outer replications for sensitivity)")
    s.add_argument("--seed", type=int)
    s.add_argument("--methods", help="comma-separated method ids, e.g. fisher,rueger,am-e@1")
    s.add_argument("--tau", type=float, help="adjustment factor for am-e (default 0.5)")
    s.add_argument("--inner", type=int, default=2000, help="inner reruns for sensitivity")
    s.add_argument("--variant", choices=["algorithms", "splits"], default="algorithms",
                   help="conformal design")
    s.add_argument("--offsets", default="0,1", help="candidate offsets for trend")
    s.add_argument("--out", help="CSV file (default stdout)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("mt-synth", help="synthetic p- and e-values from rejection sets")
    t.add_argument("--in", dest="inp", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int, help="override the request seed")
    t.set_defaults(func=cmd_mt_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
