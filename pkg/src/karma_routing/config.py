"""Scenario files, seed streams and result serialisation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .design import DesignConfig
from .errors import KarmaRoutingError, ValidationError
from .network import Network, Population, RefDistribution, SensitivityDistribution
from .simulation import KarmaInit

BUNDLED = ("five_arc_commuters",)


class ScenarioIOError(KarmaRoutingError, OSError):
    """A scenario or output file could not be read or written."""


@dataclass(frozen=True)
class OptimumConfig:
    tol: float = 1e-9
    max_iter: int = 100_000
    decimals: int = 3


@dataclass(frozen=True)
class SimConfig:
    M: int = 1000
    days: int = 600
    karma_init: KarmaInit = field(default_factory=KarmaInit)
    convention: str = "unilateral"
    max_sweeps: int = 50
    seed: int = 0


@dataclass(frozen=True)
class Scenario:
    network: Network
    population: Population
    optimum: OptimumConfig = field(default_factory=OptimumConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    prices: tuple | None = None
    source: str = ""


def _schema() -> dict:
    return json.loads(resources.files("karma_routing").joinpath("data/scenario.schema.json").read_text())


def read_text(path) -> tuple[str, str]:
    name = str(path)
    if name in BUNDLED:
        return resources.files("karma_routing").joinpath(f"data/{name}.yaml").read_text(), name
    try:
        return Path(path).read_text(), name
    except OSError as exc:
        raise ScenarioIOError(f"cannot read scenario {name}: {exc.strerror or exc}") from exc


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    """Parse and validate YAML text; every violation is reported at once."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ValidationError(f"{source}: YAML parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if raw is None:
        raise ValidationError(f"{source}: empty scenario file")
    if not isinstance(raw, dict):
        raise ValidationError(f"{source}: top level must be a mapping")

    problems = []
    validator = jsonschema.Draft202012Validator(_schema())
    for err in sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path))):
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{path}: {err.message}")
    if problems:
        raise ValidationError(f"{source}: invalid scenario; " + "; ".join(problems), problems)

    net_raw = raw["network"]
    n = len(net_raw["d0"])
    for key in ("kappa", "c0"):
        if len(net_raw[key]) != n:
            problems.append(f"network.{key}: length {len(net_raw[key])} != n={n}")
    pop_raw = raw.get("population") or {}
    sens_raw = pop_raw.get("sensitivity") or {}
    if sens_raw.get("low", 0.0) > sens_raw.get("high", 2.0):
        problems.append("population.sensitivity: low > high")
    kref_raw = pop_raw.get("kref")
    if kref_raw is not None and "weights" in kref_raw:
        w = kref_raw["weights"]
        if len(w) != len(kref_raw["support"]):
            problems.append("population.kref.weights: length differs from support")
        elif not math.isclose(sum(w), 1.0, abs_tol=1e-12):
            problems.append(f"population.kref.weights: sum {sum(w)} != 1")
    des_raw = raw.get("design") or {}
    bound = des_raw.get("price_bound", 100)
    if bound < n:
        problems.append(f"design.price_bound: {bound} < n={n}")
    if des_raw.get("elite_count", 4) >= des_raw.get("population_size", 64):
        problems.append("design.elite_count: must be smaller than population_size")
    sim_raw = raw.get("sim") or {}
    ki = sim_raw.get("karma_init") or {}
    if ki.get("low_factor", 25) > ki.get("high_factor", 50):
        problems.append("sim.karma_init: low_factor > high_factor")
    prices = raw.get("prices")
    if prices is not None:
        if len(prices) != n:
            problems.append(f"prices: length {len(prices)} != n={n}")
        elif any(abs(v) > bound for v in prices):
            problems.append(f"prices: entries exceed price_bound {bound}")
    if problems:
        raise ValidationError(f"{source}: invalid scenario; " + "; ".join(problems), problems)

    network = Network(net_raw["d0"], net_raw["kappa"], net_raw["c0"],
                      alpha=net_raw.get("alpha", 0.15), beta=net_raw.get("beta", 4))
    kref = None
    if kref_raw is not None:
        kref = (RefDistribution(kref_raw["support"], kref_raw["weights"]) if "weights" in kref_raw
                else RefDistribution.uniform(kref_raw["support"]))
    population = Population(p_home=pop_raw.get("p_home", 0.05), horizon=pop_raw.get("horizon", 4),
                            sensitivity=SensitivityDistribution(**sens_raw), kref=kref)
    des = dict(des_raw)
    if "mutation_steps" in des:
        des["mutation_steps"] = tuple(des["mutation_steps"])
    design = DesignConfig(**des)
    sim = dict(sim_raw)
    sim["karma_init"] = KarmaInit(**ki) if ki else KarmaInit()
    return Scenario(network=network, population=population,
                    optimum=OptimumConfig(**(raw.get("optimum") or {})),
                    design=design, sim=SimConfig(**sim),
                    prices=tuple(prices) if prices is not None else None, source=source)


def load_scenario(path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (``five_arc_commuters``)."""
    text, name = read_text(path)
    return parse_scenario(text, name)


# seed streams: one master seed, one independent child per pipeline stage
STREAMS = {"design": 0, "simulate": 1}


def stream_seed(master: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master), spawn_key=(STREAMS[stage],))


def stream_rng(master: int, stage: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(stream_seed(master, stage)))


def stream_int(master: int, stage: str) -> int:
    return int(stream_seed(master, stage).generate_state(1, dtype=np.uint64)[0])


def format_value(v) -> str:
    """CSV cell text: integers verbatim, floats with 10 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".10g")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def _write(path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ScenarioIOError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def emit_csv(obj, path, header=None) -> Path:
    """Write a trace (anything with ``columns()`` and ``rows()``) or explicit rows."""
    if header is None:
        header, rows = obj.columns(), obj.rows()
    else:
        rows = obj
    return _write(path, csv_text(header, rows))


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        data = list(csv.reader(fh))
    return data[0], [[float(c) for c in row] for row in data[1:]]


def emit_json(data: dict, path) -> Path:
    return _write(path, json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
