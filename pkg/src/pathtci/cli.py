"""Command-line runner: ``pathtci list`` and ``pathtci run CONFIG``.

Config files are TOML restricted to one nesting level::

    kind = "markov-tci"      # required, one of the five kinds
    seed = 7                 # required for every kind except heat-kernel
    out = "runs/tci"         # optional; --out wins

    [params]                 # optional; omitted keys take their defaults
    n_tilts = 1000
    beta_min = 0.5

No other top-level keys or tables are accepted, and ``[params]`` accepts
exactly the keys listed by ``pathtci list`` for that kind. A run writes into
the output directory:

    cases.csv      one row per case; first line ``#schema=<kind>/cases/v1``
    <table>.csv    any further tables of the suite, same header convention
    summary.json   config echo, fitted constants, named pass/fail assertions
    timing.json    wall time and timestamp (the only nondeterministic file)

Exit status: 0 when every assertion passed, 1 when any failed, 2 on a
config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("pathtci")

SCHEMA_VERSION = "v1"

_NUM = (int, float)

# kind -> (description, needs seed, {key: (default, accepted types, help)})
CATALOG: dict[str, tuple[str, bool, dict[str, tuple[Any, tuple, str]]]] = {
    "gaussian-t2": (
        "Gaussian Talagrand inequality W2^2 <= 2 KL and sharpness of the constant 2",
        True,
        {
            "mean_shifts": ([0.1, 0.5, 1.0, 2.0, 3.0], (list,), "1-D mean shifts; ratio must equal 1"),
            "sdevs": ([0.5, 2.0, 4.0], (list,), "1-D standard deviations; ratio must stay below 1"),
            "n_random": (500, (int,), "random diagonal Gaussians checked against N(0, I)"),
            "max_dim": (8, (int,), "largest dimension in the random family"),
        },
    ),
    "heat-kernel": (
        "Dirichlet heat kernel of (1/2) Laplacian on [0,1]: L2 time-integral bound sqrt(2t/pi), Chapman-Kolmogorov",
        False,
        {
            "times": ([0.01, 0.05, 0.1, 0.5, 1.0], (list,), "times t for the L2 bound"),
            "n_x": (101, (int,), "uniform grid points x in [0, 1]"),
            "ck_times": ([[0.1, 0.2]], (list,), "pairs (s, t) for the semigroup property"),
            "ck_points": ([0.2, 0.5, 0.8], (list,), "points x, y for the semigroup property"),
        },
    ),
    "markov-tci": (
        "Composition of TCI constants for a finite Markov chain with random start (forward and converse)",
        True,
        {
            "n_states": (3, (int,), "number of states"),
            "steps": (3, (int,), "time steps n; the path space has n_states^(n+1) points"),
            "positions": ([], (list,), "state positions on the line; [] draws them at random"),
            "transition": ([], (list,), "row-stochastic matrix; [] draws Dirichlet rows"),
            "initial": ([], (list,), "initial law; [] draws it at random"),
            "n_tilts": (1000, (int,), "exponential tilts of the path law"),
            "point_masses": (True, (bool,), "also check every point mass on the path space"),
            "n_converse": (200, (int,), "tilts of the initial law for the converse direction"),
            "beta_min": (0.5, _NUM, "smallest tilt strength"),
            "beta_max": (2.0, _NUM, "largest tilt strength"),
            "c0": ("auto", (str,) + _NUM, "TCI constant of the initial law, or \"auto\" to fit it on the family"),
            "c1": ("auto", (str,) + _NUM, "TCI constant of the fixed-start path laws, or \"auto\""),
        },
    ),
    "spde-coupling": (
        "Stochastic heat equation: Lipschitz dependence of the path law on the initial value (synchronous coupling)",
        True,
        {
            "J": (64, (int,), "spatial intervals"),
            "n_steps": (256, (int,), "time steps"),
            "T": (0.25, _NUM, "horizon"),
            "b": ("sin", (str,), "drift: zero | sin | constant(c) | linear(a)"),
            "sigma": ("sin", (str,), "noise coefficient: zero | sin | constant(c)"),
            "n_paths": (400, (int,), "Monte Carlo paths per pair"),
            "pairs": (
                [
                    ["sin(1)", "0.5*sin(1)"],
                    ["sin(2)", "zero"],
                    ["tent", "zero"],
                    ["sin(1)", "-1*sin(1)"],
                    ["0.3*sin(3)", "bump"],
                    ["0.25*sin(1)", "zero"],
                ],
                (list,),
                "initial profile pairs [f, g]; terms A*sin(k), A*tent, A*bump, zero joined by +",
            ),
            "scales": ([0.5, 1.0, 2.0], (list,), "lambda for the (lambda f, lambda g) subfamily"),
            "additive_sigma": (1.0, _NUM, "constant sigma of the additive-noise control"),
            "mean_check": (True, (bool,), "compare the b = 0 Monte Carlo mean with P_T f"),
        },
    ),
    "spde-convolution": (
        "Stochastic convolution sup-moment against eps*E sup|gamma|^2 + C int E sup|gamma|^2",
        True,
        {
            "J": (64, (int,), "spatial intervals"),
            "n_steps": (256, (int,), "time steps"),
            "T": (0.25, _NUM, "horizon"),
            "b": ("sin", (str,), "drift of the underlying solution"),
            "sigma": ("sin", (str,), "noise coefficient of the underlying solution"),
            "n_paths": (400, (int,), "Monte Carlo paths"),
            "gamma": ("sigma", (str,), "integrand: zero | one | sigma"),
            "eps": ("auto", (str,) + _NUM, "epsilon, or \"auto\" for 1/(6 K^2)"),
            "f": ("sin(1)", (str,), "initial profile of the underlying solution"),
            "report_levels": (32, (int,), "time levels written to the CSV"),
        },
    ),
}

_TOP_KEYS = {"kind", "seed", "out", "params"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    seed: int | None
    out: str | None
    params: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "params": self.params}


def _type_ok(value, types) -> bool:
    if isinstance(value, bool) and bool not in types:
        return False
    if value == "auto" and str in types:
        return True
    if isinstance(value, str) and str in types and len(types) > 1:
        # string allowed only as the "auto" sentinel when numbers are also accepted
        return False
    return isinstance(value, types)


def parse_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown top-level key(s) {sorted(unknown)}; allowed {sorted(_TOP_KEYS)}")
    kind = data.get("kind")
    if kind not in CATALOG:
        raise ConfigError(f"{source}: key 'kind' must be one of {sorted(CATALOG)}, got {kind!r}")
    _, needs_seed, schema = CATALOG[kind]
    seed = data.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise ConfigError(f"{source}: key 'seed' must be a nonnegative integer")
    out = data.get("out")
    if out is not None and not isinstance(out, str):
        raise ConfigError(f"{source}: key 'out' must be a string")
    raw = data.get("params", {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: 'params' must be a table")
    bad = set(raw) - set(schema)
    if bad:
        raise ConfigError(f"{source}: unknown key(s) {sorted(bad)} in [params] for kind {kind!r}")
    params = {}
    for key, (default, types, _) in schema.items():
        value = raw.get(key, default)
        if any(isinstance(v, dict) for v in (value if isinstance(value, list) else [value])):
            raise ConfigError(f"{source}: params.{key} nests too deeply")
        if not _type_ok(value, types):
            names = "/".join(t.__name__ for t in types)
            raise ConfigError(f"{source}: params.{key} must be {names}, got {value!r}")
        params[key] = value
    cfg = ExperimentConfig(kind, seed, out, params)
    if needs_seed and seed is None:
        raise ConfigError(f"{source}: kind {kind!r} is stochastic and needs a 'seed'")
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        # message carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, str(path))


def default_config(kind: str, seed: int | None = 0) -> ExperimentConfig:
    data: dict = {"kind": kind}
    if CATALOG[kind][1]:
        data["seed"] = seed
    return parse_config(data)


def list_experiments() -> str:
    lines = []
    for kind, (desc, needs_seed, schema) in CATALOG.items():
        lines.append(f"{kind}")
        lines.append(f"  checks: {desc}")
        lines.append(f"  seed: {'required' if needs_seed else 'not used'}")
        for key, (default, types, help_) in schema.items():
            names = "|".join(t.__name__ for t in types)
            lines.append(f"  {key} ({names}) = {json.dumps(default)}  # {help_}")
        lines.append("")
    return "\n".join(lines)


# --- output ------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, float) and not (obj == obj and abs(obj) != float("inf")):
        return repr(obj)
    return obj


@dataclass
class RunReport:
    config: ExperimentConfig
    csv_paths: list[Path]
    summary: dict
    wall_time: float

    @property
    def ok(self) -> bool:
        return all(a["passed"] for a in self.summary["assertions"])


def run(config: ExperimentConfig, out_dir: str | os.PathLike, workers: int = 1) -> RunReport:
    from pathtci.suites import RUNNERS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = RUNNERS[config.kind](config.params, config.seed if config.seed is not None else 0, workers)
    wall = time.perf_counter() - t0

    csv_paths = []
    for table in result.tables:
        buf = io.StringIO()
        buf.write(f"#schema={config.kind}/{table.name}/{SCHEMA_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_fmt(v) for v in row])
        path = out / f"{table.name}.csv"
        _atomic_write(path, buf.getvalue())
        csv_paths.append(path)

    summary = {
        "schema": f"{config.kind}/summary/{SCHEMA_VERSION}",
        "config": config.echo(),
        "passed": result.ok,
        "results": _jsonable(result.summary),
        "assertions": [a.as_dict() for a in result.assertions],
    }
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timing = {"wall_time_s": wall, "finished_utc": datetime.now(timezone.utc).isoformat(), "threads": workers}
    _atomic_write(out / "timing.json", json.dumps(timing, indent=2) + "\n")
    return RunReport(config, csv_paths, summary, wall)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pathtci", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="print the experiment kinds and their parameters")
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="TOML config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output directory (default: config 'out' or runs/<kind>)")
    p_run.add_argument("--threads", type=int, default=1, help="worker threads; changes speed only")
    p_run.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    if args.command == "list":
        print(list_experiments())
        return 0

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or cfg.out or os.path.join("runs", cfg.kind)
    report = run(cfg, out, max(1, args.threads))
    for a in report.summary["assertions"]:
        mark = "PASS" if a["passed"] else "FAIL"
        print(f"{mark} {a['name']}: {a['invariant']}" + (f"  [{a['detail']}]" if a["detail"] else ""))
    print(f"wrote {', '.join(str(p) for p in report.csv_paths)} and {Path(out) / 'summary.json'} ({report.wall_time:.2f}s)")
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
