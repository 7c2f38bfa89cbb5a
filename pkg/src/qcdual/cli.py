"""Command-line surface: one config document in, one artifact file out.

A run configuration is a single JSON document (structured text: nested
key-value with arrays) that fully specifies the model, the command, its
parameters, and the output target, so a result is reproducible from the
config alone.  Exit status is 0 on success; failures print a one-line
machine-readable JSON error record to stderr and exit with

* 2 — the config or a source expression does not parse,
* 3 — the config parses but violates a precondition,
* 4 — a numerical run failed (certification, non-convergence, blowup),
* 5 — the config or output file could not be read/written.

Config layout::

    {
      "model":   {"kind": "spectral", "n_channels": 1, "thresholds": [0.0],
                  "e_bound": -1.0, "weights": [1.4142135623730951]}
                 -- or -- {"kind": "zero", "n_channels": 1, "thresholds": [0.0]},
      "command": "potential" | "bound-state" | "trajectory" | "scan"
                 | "concentrate" | "forced" | "scatter",
      "params":  {...},                 # see the per-command docs in _execute
      "output":  "artifact.csv",        # overridden by --out
      "format":  "csv" | "structured-text",   # overridden by --format
      "workers": 4                      # scan only; overridden by --workers
    }

Source expressions (command ``forced``) follow the grammar::

    spec    := channel (';' channel)*          # one channel per ';'
    channel := term ('+' term)*
    term    := [number '*'] func
    func    := 'const(' number ')' | 'sin(' number ')' | 'cos(' number ')'
             | 'gauss(' number ',' number ')'

with ``sin(w) = sin(w*t)``, ``cos(w) = cos(w*t)`` and
``gauss(c, w) = exp(-((t-c)/w)^2)``.  Whitespace is insignificant.
"""

from __future__ import annotations

import argparse
import io
import json
import math
import os
import re
import sys
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .analysis import (
    SourceTerm,
    concentration_sweep,
    scan_bifurcations,
    solve_with_source,
)
from .core import (
    PotentialMatrix,
    SpectralData,
    bound_state,
    build_reflectionless,
    zero_potential,
)
from .duality import ClassicalState, dualize
from .errors import IntegrationError, SourceParseError, ValidationError
from .integrate import parse_start_mode, reflection, shoot_schrodinger

__all__ = ["RunConfig", "run", "source_parse", "gallery_configs", "main"]

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4
EXIT_IO = 5

_COMMANDS = (
    "potential",
    "bound-state",
    "trajectory",
    "scan",
    "concentrate",
    "forced",
    "scatter",
)
_FORMATS = ("csv", "structured-text")


class _ConfigError(ValueError):
    """Structural problem in the config document (exit status 2)."""


# ----------------------------------------------------------------------
# Source expression parser
# ----------------------------------------------------------------------

_NUM_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[a-z]+")
_ARITY = {"const": 1, "sin": 1, "cos": 1, "gauss": 2}


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise SourceParseError(f"expected {ch!r}", self.pos)
        self.pos += 1

    def number(self) -> float:
        self.skip_ws()
        m = _NUM_RE.match(self.text, self.pos)
        if not m:
            raise SourceParseError("expected a number", self.pos)
        self.pos = m.end()
        return float(m.group())

    def name(self) -> str:
        self.skip_ws()
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            raise SourceParseError("expected a function name", self.pos)
        self.pos = m.end()
        return m.group()


def _parse_term(sc: _Scanner):
    sc.skip_ws()
    start = sc.pos
    scale = 1.0
    save = sc.pos
    if _NUM_RE.match(sc.text, sc.pos):
        scale = sc.number()
        if sc.peek() == "*":
            sc.expect("*")
        else:
            raise SourceParseError("a scale must be followed by '*'", sc.pos)
        sc.skip_ws()
        start = sc.pos
    else:
        sc.pos = save
    kind = sc.name()
    if kind not in _ARITY:
        raise SourceParseError(f"unknown function {kind!r}", start)
    sc.expect("(")
    args = [sc.number()]
    for _ in range(_ARITY[kind] - 1):
        sc.expect(",")
        args.append(sc.number())
    sc.expect(")")
    if kind == "gauss" and args[1] == 0.0:
        raise SourceParseError("gauss width must be nonzero", start)
    return _make_term(scale, kind, args)


def _make_term(scale: float, kind: str, args: list[float]):
    if kind == "const":
        c = scale * args[0]
        return lambda t: c
    if kind == "sin":
        w = args[0]
        return lambda t: scale * math.sin(w * t)
    if kind == "cos":
        w = args[0]
        return lambda t: scale * math.cos(w * t)
    c, w = args
    return lambda t: scale * math.exp(-(((t - c) / w) ** 2))


def source_parse(spec: str) -> SourceTerm:
    """Parse a per-channel source expression into a :class:`SourceTerm`.

    ``spec`` holds one channel expression per ``;``; each is a ``+``-joined
    sum of optionally scaled terms (see the module docstring for the
    grammar).  Raises :class:`SourceParseError` carrying the character
    position of the first offending token.
    """
    if not isinstance(spec, str) or not spec.strip():
        raise SourceParseError("empty source expression", 0)
    sc = _Scanner(spec)
    channels: list[list] = []
    while True:
        terms = [_parse_term(sc)]
        while sc.peek() == "+":
            sc.expect("+")
            terms.append(_parse_term(sc))
        channels.append(terms)
        if sc.peek() == ";":
            sc.expect(";")
            continue
        break
    sc.skip_ws()
    if sc.pos != len(sc.text):
        raise SourceParseError("unexpected trailing input", sc.pos)

    def g(t: float, _channels=tuple(tuple(ts) for ts in channels)) -> np.ndarray:
        return np.array([math.fsum(f(t) for f in ts) for ts in _channels])

    return SourceTerm(n_channels=len(channels), g=g, spec_text=spec)


# ----------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """One fully validated run: model, command, parameters, output target."""

    model: PotentialMatrix
    thresholds: tuple[float, ...]
    spectral: SpectralData | None
    command: str
    params: dict
    output: str
    format: str
    workers: int

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        """Build and validate a config; structural errors raise, early.

        The split between failure kinds follows the exit-status contract:
        malformed structure (wrong types, unknown command names, missing
        keys) raises :class:`_ConfigError` (status 2), while well-formed
        values that violate an operation's precondition raise
        :class:`ValidationError` (status 3) from the library itself.
        """
        if not isinstance(doc, dict):
            raise _ConfigError("config document must be a JSON object")
        unknown = set(doc) - {"model", "command", "params", "output", "format", "workers"}
        if unknown:
            raise _ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("model", "command", "output"):
            if key not in doc:
                raise _ConfigError(f"config is missing required key {key!r}")

        model_doc = doc["model"]
        if not isinstance(model_doc, dict) or "kind" not in model_doc:
            raise _ConfigError("model must be an object with a 'kind' key")
        kind = model_doc["kind"]
        spectral = None
        if kind == "spectral":
            spectral = SpectralData.from_dict(
                {k: v for k, v in model_doc.items() if k != "kind"}
            )
            potential = build_reflectionless(spectral)
            thresholds = spectral.thresholds
        elif kind == "zero":
            n = model_doc.get("n_channels")
            if not isinstance(n, int) or n < 1:
                raise _ConfigError("zero model needs a positive integer n_channels")
            potential = zero_potential(n)
            thresholds = tuple(float(e) for e in model_doc.get("thresholds", [0.0] * n))
            if len(thresholds) != n:
                raise ValidationError(
                    f"zero model has {n} channels but {len(thresholds)} thresholds"
                )
        else:
            raise _ConfigError(f"unknown model kind {kind!r}")

        command = doc["command"]
        if command not in _COMMANDS:
            raise _ConfigError(f"unknown command {command!r}; expected one of {_COMMANDS}")
        params = doc.get("params", {})
        if not isinstance(params, dict):
            raise _ConfigError("params must be an object")
        fmt = doc.get("format", "csv")
        if fmt not in _FORMATS:
            raise _ConfigError(f"unknown format {fmt!r}; expected one of {_FORMATS}")
        output = doc["output"]
        if not isinstance(output, str) or not output:
            raise _ConfigError("output must be a nonempty path string")
        workers = doc.get("workers", os.cpu_count() or 1)
        if not isinstance(workers, int) or workers < 1:
            raise _ConfigError("workers must be a positive integer")
        config = cls(
            model=potential,
            thresholds=thresholds,
            spectral=spectral,
            command=command,
            params=params,
            output=output,
            format=fmt,
            workers=workers,
        )
        _validate_params(config)
        return config


def _need(params: dict, key: str, command: str):
    if key not in params:
        raise _ConfigError(f"command {command!r} requires params.{key}")
    return params[key]


def _grid_axis(params: dict, command: str) -> np.ndarray:
    grid = _need(params, "grid", command)
    if not isinstance(grid, dict) or {"start", "stop", "points"} - set(grid):
        raise _ConfigError("grid must be an object with start, stop, points")
    points = grid["points"]
    if not isinstance(points, int) or points < 2:
        raise _ConfigError("grid.points must be an integer >= 2")
    start, stop = float(grid["start"]), float(grid["stop"])
    if not start < stop:
        raise ValidationError(f"empty grid [{start}, {stop}]")
    return np.linspace(start, stop, points)


def _validate_params(config: RunConfig) -> None:
    """Check every command parameter before any integration starts."""
    p = config.params
    cmd = config.command
    if cmd in ("potential", "bound-state"):
        _grid_axis(p, cmd)
        if cmd == "bound-state" and config.spectral is None:
            raise ValidationError("bound-state requires a spectral model")
    elif cmd == "trajectory":
        for key in ("energy", "x_start", "x_end", "start_mode"):
            _need(p, key, cmd)
        parse_start_mode(str(p["start_mode"]))
    elif cmd == "scan":
        e_range = _need(p, "e_range", cmd)
        if not (isinstance(e_range, (list, tuple)) and len(e_range) == 2):
            raise _ConfigError("scan.e_range must be a two-element array")
        for key in ("grid_step", "tol"):
            value = _need(p, key, cmd)
            if not (isinstance(value, (int, float)) and value > 0):
                raise ValidationError(f"scan.{key} must be positive")
    elif cmd == "concentrate":
        if config.spectral is None:
            raise ValidationError("concentrate requires a spectral model")
        target = _need(p, "target_channel", cmd)
        if not isinstance(target, int) or not 1 <= target <= config.spectral.n_channels:
            raise ValidationError(
                f"target_channel must be a 1-based channel index <= {config.spectral.n_channels}"
            )
        values = _need(p, "m_values", cmd)
        if not isinstance(values, (list, tuple)) or not values:
            raise _ConfigError("concentrate.m_values must be a nonempty array")
    elif cmd == "forced":
        for key in ("energy", "source", "initial", "t_end"):
            _need(p, key, cmd)
        source = source_parse(str(p["source"]))
        n = config.model.n_channels
        if source.n_channels != n:
            raise ValidationError(
                f"source has {source.n_channels} channels, model has {n}"
            )
        init = p["initial"]
        if not isinstance(init, dict) or {"t", "z", "zdot"} - set(init):
            raise _ConfigError("forced.initial must be an object with t, z, zdot")
        if len(init["z"]) != n or len(init["zdot"]) != n:
            raise ValidationError(f"initial z and zdot must each have {n} entries")
        method = p.get("method", "variation-of-parameters")
        if method not in ("variation-of-parameters", "direct"):
            raise ValidationError(f"unknown forced method {method!r}")
    elif cmd == "scatter":
        _need(p, "energy", cmd)
        channel = p.get("incoming_channel", 1)
        if not isinstance(channel, int) or not 1 <= channel <= config.model.n_channels:
            raise ValidationError(
                f"incoming_channel must be a 1-based channel index <= {config.model.n_channels}"
            )


# ----------------------------------------------------------------------
# Command execution
# ----------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _structured(doc: dict) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"


def _csv_rows(header: Sequence[str], rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(format(float(v), ".17g") for v in row))
    return "\n".join(out) + "\n"


def _traj_text(traj, fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        traj.to_csv(buf)
        return buf.getvalue()
    return _structured(
        {
            "t": traj.t,
            "z": traj.z,
            "zdot": traj.zdot,
            "growth": bool(traj.growth),
            "meta": {k: _jsonable(v) for k, v in traj.meta.items() if k != "labels"},
        }
    )


def _rel_tol(params: dict, default: float = 1e-10) -> float:
    return float(params.get("rel_tol", default))


def _abs_tol(params: dict, default: float = 1e-12) -> float:
    return float(params.get("abs_tol", default))


def _execute(config: RunConfig) -> str:
    """Run the configured command and render its artifact as text.

    Per-command parameters:

    - ``potential``: grid {start, stop, points} -> sampled matrix elements.
    - ``bound-state``: grid -> sampled components plus norms header data.
    - ``trajectory``: energy, x_start, x_end, start_mode, [rel_tol, abs_tol].
    - ``scan``: e_range [lo, hi], grid_step, tol.
    - ``concentrate``: target_channel (1-based), m_values.
    - ``forced``: energy, source, initial {t, z, zdot}, t_end,
      [method, rel_tol, abs_tol].
    - ``scatter``: energy, [incoming_channel (1-based), rel_tol, abs_tol].
    """
    p = config.params
    cmd = config.command
    if cmd == "potential":
        xs = _grid_axis(p, cmd)
        values = config.model(xs)
        n = config.model.n_channels
        header = ["x"] + [f"v_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
        rows = (
            [xs[k], *values[k].reshape(-1)] for k in range(xs.shape[0])
        )
        if config.format == "csv":
            return _csv_rows(header, rows)
        return _structured({"x": xs, "v": values})
    if cmd == "bound-state":
        xs = _grid_axis(p, cmd)
        state = bound_state(config.spectral, quad_rel_tol=_rel_tol(p, 1e-10))
        psi = state.components(xs)
        n = config.spectral.n_channels
        if config.format == "csv":
            header = ["x"] + [f"psi_{i + 1}" for i in range(n)]
            rows = ([xs[k], *psi[k]] for k in range(xs.shape[0]))
            return _csv_rows(header, rows)
        return _structured(
            {
                "energy": state.energy,
                "channel_norms": state.channel_norms,
                "total_norm": state.total_norm,
                "x": xs,
                "psi": psi,
            }
        )
    if cmd == "trajectory":
        traj = shoot_schrodinger(
            config.model,
            float(p["energy"]),
            config.thresholds,
            float(p["x_start"]),
            float(p["x_end"]),
            str(p["start_mode"]),
            rel_tol=_rel_tol(p),
            abs_tol=_abs_tol(p),
        )
        return _traj_text(traj, config.format)
    if cmd == "scan":
        report = scan_bifurcations(
            config.model,
            config.thresholds,
            (float(p["e_range"][0]), float(p["e_range"][1])),
            float(p["grid_step"]),
            float(p["tol"]),
            workers=config.workers,
        )
        if config.format == "csv":
            buf = io.StringIO()
            report.to_csv(buf)
            return buf.getvalue()
        return _structured(report.to_dict())
    if cmd == "concentrate":
        report = concentration_sweep(
            config.spectral,
            int(p["target_channel"]) - 1,
            [float(m) for m in p["m_values"]],
        )
        if config.format == "csv":
            buf = io.StringIO()
            report.to_csv(buf)
            return buf.getvalue()
        return _structured(report.to_dict())
    if cmd == "forced":
        energy = float(p["energy"])
        e_params = tuple(energy - e for e in config.thresholds)
        system = dualize(config.model, e_params)
        source = source_parse(str(p["source"]))
        init = p["initial"]
        initial = ClassicalState(
            t=float(init["t"]),
            z=tuple(float(v) for v in init["z"]),
            zdot=tuple(float(v) for v in init["zdot"]),
        )
        traj = solve_with_source(
            system,
            source,
            initial,
            float(p["t_end"]),
            rel_tol=_rel_tol(p),
            abs_tol=_abs_tol(p),
            method=p.get("method", "variation-of-parameters"),
        )
        return _traj_text(traj, config.format)
    # scatter
    result = reflection(
        config.model,
        config.thresholds,
        float(p["energy"]),
        incoming_channel=int(p.get("incoming_channel", 1)) - 1,
        rel_tol=_rel_tol(p),
        abs_tol=_abs_tol(p),
    )
    doc = {
        "energy": result.energy,
        "reflection_norm": result.reflection_norm,
        "transmission_norm": result.transmission_norm,
        "open_channels": [c + 1 for c in result.open_channels],
        "incoming_channel": result.incoming_channel + 1,
        "unitarity_defect": result.unitarity_defect,
        "reflection_amplitudes": result.reflection_amplitudes,
        "transmission_amplitudes": result.transmission_amplitudes,
    }
    if config.format == "csv":
        header = ["energy", "reflection_norm", "transmission_norm", "unitarity_defect"]
        rows = [[doc[k] for k in header]]
        return _csv_rows(header, rows)
    return _structured(doc)


def run(config: RunConfig) -> int:
    """Execute one validated config and write its artifact; returns 0."""
    text = _execute(config)
    with open(config.output, "w", newline="") as fh:
        fh.write(text)
    return EXIT_OK


# ----------------------------------------------------------------------
# Bundled gallery
# ----------------------------------------------------------------------


def gallery_configs() -> dict[str, str]:
    """Map from bundled example name to its config path on disk."""
    base = resources.files("qcdual").joinpath("gallery")
    out = {}
    for entry in sorted(base.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            out[entry.name[:-5]] = str(entry)
    return out


# ----------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------


def _fail(status: int, kind: str, message: str) -> int:
    sys.stderr.write(
        json.dumps({"error": kind, "message": message, "status": status}, sort_keys=True)
        + "\n"
    )
    return status


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="qcdual",
        description="Run one spectral-model command from a JSON config document.",
    )
    parser.add_argument("--config", required=True, help="path to the run config")
    parser.add_argument("--out", help="override the config's output path")
    parser.add_argument("--format", choices=_FORMATS, help="override the output format")
    parser.add_argument("--workers", type=int, help="override the scan worker count")
    parser.add_argument(
        "--tol",
        type=float,
        help="override the run's relative tolerance "
        "(trajectory/forced/scatter rel_tol, scan bisection tol)",
    )
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r") as fh:
            raw = fh.read()
    except OSError as exc:
        return _fail(EXIT_IO, "io", f"cannot read config: {exc}")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        return _fail(EXIT_PARSE, "parse", f"config is not valid JSON: {exc}")

    if args.out is not None:
        doc = {**doc, "output": args.out}
    if args.format is not None:
        doc = {**doc, "format": args.format}
    if args.workers is not None:
        doc = {**doc, "workers": args.workers}
    if args.tol is not None and isinstance(doc, dict):
        params = dict(doc.get("params", {}))
        if doc.get("command") == "scan":
            params["tol"] = args.tol
        else:
            params["rel_tol"] = args.tol
        doc = {**doc, "params": params}

    try:
        config = RunConfig.from_dict(doc)
    except (_ConfigError, SourceParseError) as exc:
        return _fail(EXIT_PARSE, "parse", str(exc))
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except (TypeError, KeyError) as exc:
        return _fail(EXIT_PARSE, "parse", f"malformed config value: {exc}")

    try:
        return run(config)
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    except IntegrationError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, "io", f"cannot write artifact: {exc}")


if __name__ == "__main__":
    sys.exit(main())
