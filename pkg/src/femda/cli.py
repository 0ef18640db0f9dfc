"""Command-line experiment runner.

    femda interp-check   --config cfg.json --out runs/interp
    femda conv-rate      --out runs/rates
    femda mu-sweep       --config sweep.json --out runs/sweep
    femda transport-demo --out runs/river
    femda stokes-velocity --out runs/stokes
    femda cylinder dns   --out runs/cyl
    femda cylinder da    --config da.json --out runs/cyl-da

Config files are JSON objects holding parameter overrides (optionally under a
``"params"`` key, with an optional ``"seed"``).  Every run directory receives a
``manifest.json`` with the resolved configuration and the list of outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, experiments
from .errors import FemdaError

logger = logging.getLogger("femda")

MANIFEST = "manifest.json"


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        if not isinstance(data, dict) or "experiment" not in data:
            raise FemdaError("config must be a JSON object with an 'experiment' field")
        unknown = set(data) - {"experiment", "params", "seed"}
        if unknown:
            raise FemdaError(f"unknown config keys {sorted(unknown)}")
        return cls(data["experiment"], dict(data.get("params") or {}), int(data.get("seed", 0)))

    def resolved(self):
        return experiments.resolve(self.experiment, self.params)


def load_config(path, experiment):
    """Read a config file; a bare parameter object is accepted as well."""
    if path is None:
        return ExperimentConfig(experiment)
    p = Path(path)
    if not p.exists():
        raise FemdaError(f"config file {p} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FemdaError(f"config file {p} is not valid JSON: {exc}") from None
    if isinstance(data, dict) and "experiment" in data:
        cfg = ExperimentConfig.from_json(p.read_text())
        if cfg.experiment != experiment:
            raise FemdaError(f"config is for {cfg.experiment!r}, not {experiment!r}")
        return cfg
    if not isinstance(data, dict):
        raise FemdaError("config must be a JSON object")
    seed = int(data.pop("seed", 0))
    return ExperimentConfig(experiment, data.get("params", data), seed)


@dataclass
class RunManifest:
    experiment: str
    config: dict
    version: str
    wall_clock_s: float
    outputs: list
    summary: dict

    def write(self, out):
        path = Path(out) / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


DRIVERS = {
    "interp-check": experiments.interp_check,
    "conv-rate": experiments.conv_rate,
    "mu-sweep": experiments.mu_sweep,
    "transport-demo": experiments.transport_demo,
    "stokes-velocity": None,
    "cylinder-dns": experiments.cylinder_dns,
    "cylinder-da": experiments.cylinder_da,
}


def _stokes_velocity(params, out):
    mesh = experiments.load_mesh(params["mesh"])
    ms, v, p = experiments.stokes_velocity(mesh, params["stokes"]["nu"], params["stokes"]["inflow"])
    path = Path(out) / "stokes_velocity.txt"
    np.savetxt(path, v, fmt="%.17g")
    return {"velocity_dofs": ms.nv, "max_speed": float(np.max(np.abs(v)))}, [path]


def run_experiment(config, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if config.experiment == "stokes-velocity":
        params = experiments.resolve("transport-demo", config.params)
        driver = _stokes_velocity
    else:
        params = config.resolved()
        driver = DRIVERS[config.experiment]
    np.random.seed(config.seed)
    start = time.perf_counter()
    summary, files = driver(params, out)
    elapsed = time.perf_counter() - start
    (out / "config.json").write_text(
        ExperimentConfig(config.experiment, params, config.seed).to_json() + "\n")
    outputs = sorted({str(Path(f).relative_to(out)) for f in files} | {"config.json", MANIFEST})
    manifest = RunManifest(config.experiment, params, __version__, elapsed, outputs, summary)
    manifest.write(out)
    return manifest


def build_parser():
    parser = argparse.ArgumentParser(prog="femda", description="Finite-element continuous data assimilation experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, help_text, parent=sub):
        p = parent.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file with parameter overrides")
        p.add_argument("--out", required=True, help="output directory")
        return p

    add("interp-check", "measured interpolation errors and rates")
    add("conv-rate", "transport convergence-rate table")
    add("mu-sweep", "error-vs-time sweep over mu and H")
    add("transport-demo", "contaminant transport in a sinusoidal channel")
    add("stokes-velocity", "steady Stokes velocity for the channel demo")
    cyl = sub.add_parser("cylinder", help="flow past a cylinder")
    cyl_sub = cyl.add_subparsers(dest="mode", required=True)
    add("dns", "reference run (no nudging) with archived states", cyl_sub)
    add("da", "assimilation runs against an archived reference", cyl_sub)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    experiment = f"cylinder-{args.mode}" if args.verb == "cylinder" else args.verb
    try:
        config = load_config(args.config, experiment)
        manifest = run_experiment(config, args.out)
    except (FemdaError, ValueError, KeyError, OSError) as exc:
        print(f"femda {experiment}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(manifest.summary, indent=2, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
