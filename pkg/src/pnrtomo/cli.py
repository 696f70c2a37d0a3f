"""Command-line entry point: ``pnrtomo simulate`` and ``pnrtomo pipeline``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 stage failure,
5 refusal to overwrite an existing archive.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .io import TraceFileError, encode_traces, atomic_write_bytes, write_json
from .pipeline import STAGES, ArchiveExistsError, ConfigError, PipelineConfig, StageError, run_pipeline
from .sim import DetectorGroundTruth, SimConfig, simulate_probe_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STAGE, EXIT_EXISTS = 0, 2, 3, 4, 5

log = logging.getLogger("pnrtomo")

_SIM_KEYS = {"alpha_sq", "probe_amplitudes", "trials_per_probe", "samples_per_trace", "seed",
             "sample_format", "int16_gain", "truth"}


def _fail(code, msg):
    print(f"pnrtomo: {msg}", file=sys.stderr)
    return code


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return cfg


def _truth_from(params: dict, samples: int) -> DetectorGroundTruth:
    if "pulse_shape" in params:
        return DetectorGroundTruth.from_dict(params)
    return DetectorGroundTruth.default(samples_per_trace=samples, **params)


def build_simulation(cfg: dict):
    """Validate a simulate config; returns ``(SimConfig, truth, sample_format, gain)``."""
    unknown = set(cfg) - _SIM_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        samples = int(cfg.get("samples_per_trace", 64))
        trials = int(cfg["trials_per_probe"])
        seed = int(cfg.get("seed", 0))
        if ("alpha_sq" in cfg) == ("probe_amplitudes" in cfg):
            raise ConfigError("give exactly one of alpha_sq or probe_amplitudes")
        if "alpha_sq" in cfg:
            sim = SimConfig.from_alpha_sq(cfg["alpha_sq"], trials, samples, seed)
        else:
            sim = SimConfig(cfg["probe_amplitudes"], trials, samples, seed)
        truth = _truth_from(dict(cfg.get("truth", {})), samples)
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid simulation config: {exc}") from None
    if truth.samples_per_trace != samples:
        raise ConfigError("truth pulse length differs from samples_per_trace")
    fmt = cfg.get("sample_format", "float64")
    if fmt not in ("float64", "int16"):
        raise ConfigError("sample_format must be 'float64' or 'int16'")
    gain = float(cfg.get("int16_gain", 1000.0))
    return sim, truth, fmt, gain


def cmd_simulate(args) -> int:
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        sim, truth, fmt, gain = build_simulation(cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))

    try:
        ens = simulate_probe_ensemble(sim, truth, threads=args.threads)
    except ValueError as exc:  # e.g. probe energies beyond the simulator truncation
        return _fail(EXIT_CONFIG, str(exc))
    data = ens.traces.data * gain if fmt == "int16" else ens.traces.data
    payload = encode_traces(data, sim.alpha_sq, ens.traces.probe_labels, fmt)
    out = Path(args.out)
    sidecar = out.with_name(out.name + ".json")
    meta = {
        "probe_amplitudes": sim.probe_amplitudes.tolist(),
        "alpha_sq": sim.alpha_sq.tolist(),
        "seed": sim.rng_seed,
        "simulation": sim.to_dict(),
        "sample_format": fmt,
        "int16_gain": gain if fmt == "int16" else None,
        "truth": truth.to_dict(),
    }
    try:
        atomic_write_bytes(out, payload)
        try:
            write_json(sidecar, meta)
        except OSError:
            out.unlink(missing_ok=True)
            raise
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {out}: {exc.strerror or exc}")
    log.info("wrote %d traces to %s", data.shape[0], out)
    return EXIT_OK


def build_pipeline_config(args) -> PipelineConfig:
    cfg = _load_config(args.config)
    overrides = {
        "traces": args.traces,
        "out": args.out,
        "seed": args.seed,
        "stages": args.stages,
        "grid_points": args.grid_points,
        "n_max": args.n_max,
        "prior": args.prior,
        "calib_sigma": args.calib_sigma,
        "threads": args.threads,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = PipelineConfig.from_mapping(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    config.validate()
    if config.out is None:
        raise ConfigError("no output archive given (--out)")
    if "pca" in config.stages:
        if config.traces is None:
            raise ConfigError("the pca stage needs a trace file (--traces)")
        if not Path(config.traces).is_file():
            raise FileNotFoundError(f"trace file {config.traces} not found")
    return config


def cmd_pipeline(args) -> int:
    try:
        config = build_pipeline_config(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))
    try:
        manifest = run_pipeline(config, force=args.force)
    except ArchiveExistsError as exc:
        return _fail(EXIT_EXISTS, str(exc))
    except StageError as exc:
        code = EXIT_IO if isinstance(exc.cause, (OSError, TraceFileError)) else EXIT_STAGE
        return _fail(code, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write archive: {exc}")
    eff = manifest["summary"].get("efficiency")
    if eff:
        log.info("efficiency %.4f", eff["efficiency"])
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnrtomo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic coherent-probe traces")
    s.add_argument("--config", required=True, help="JSON simulation config")
    s.add_argument("--out", required=True, help="trace file to write (sidecar goes to <out>.json)")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    q = sub.add_parser("pipeline", help="run the analysis stages into a results directory")
    q.add_argument("--config", help="JSON pipeline config; flags take precedence")
    q.add_argument("--traces", help="input trace file")
    q.add_argument("--out", help="results directory")
    q.add_argument("--seed", type=int, help="recorded in the manifest; the analysis itself is deterministic")
    q.add_argument("--stages", type=lambda t: tuple(x.strip() for x in t.split(",") if x.strip()),
                   help=f"comma-separated subset of {','.join(STAGES)}")
    q.add_argument("--force", action="store_true", help="overwrite an existing archive")
    q.add_argument("--grid-points", type=int)
    q.add_argument("--n-max", type=int)
    q.add_argument("--prior", help="flat | thermal:<lambda^2> | poisson:<|alpha|^2>")
    q.add_argument("--calib-sigma", type=float, help="relative 1-sigma of the probe-energy calibration")
    q.add_argument("--threads", type=int)
    q.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        return _fail(EXIT_CONFIG, "--threads must be >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
