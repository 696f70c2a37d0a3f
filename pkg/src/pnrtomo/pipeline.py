"""Stage-by-stage analysis pipeline writing a results archive directory.

Stages run in the order PCA -> densities -> EM -> marginalization ->
efficiency -> confidence. Each stage writes its outputs into the archive;
a later stage run on its own reloads what it needs from there.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .calibration import marginalize_povm
from .density import OutcomeGrid, estimate_density, select_bandwidth
from .inference import (
    PriorDistribution,
    Window,
    confidence,
    confidence_vs_thermal_parameter,
    efficiency_interval,
    efficiency_objective,
    estimate_efficiency,
    peak_center_confidence,
)
from .io import load_arrays, read_traces, save_arrays, sha256_file, write_csv, write_json
from .pca import TraceSet, fit_basis, project
from .povm import GaussianMixturePovm, PovmTable, mixture_to_table, poisson_matrix
from .tomo import EmConfig, ProbeEnsemble, deconvolve_bandwidth, em_fit, pooled_peak_widths, reconstruction_error

log = logging.getLogger(__name__)

STAGES = ("pca", "density", "em", "marginalize", "efficiency", "confidence")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class ArchiveExistsError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    traces: Optional[str] = None
    out: Optional[str] = None
    stages: tuple = STAGES
    n_components: int = 2
    grid_points: int = 2048
    bandwidth_method: str = "isj"
    bandwidth_policy: str = "shared"  # or "per_probe"
    n_max: int = 17
    max_iterations: int = 2000
    rel_tol: float = 1e-8
    sigma_floor: Optional[float] = None
    init_strategy: str = "quantile_spaced"
    init_efficiency: Optional[float] = None  # None: estimate from the vacuum peak
    efficiency_min_weight: float = 0.05
    prior: str = "flat"
    thermal_sweep: tuple = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    calib_mean: float = 1.0
    calib_sigma: float = 0.01
    n_quad: int = 7
    window_half_width: Optional[float] = None  # None: twice the median peak width
    confidence_n_max: Optional[int] = None  # None: rows illuminated by the probes
    seed: int = 0
    threads: int = 1

    def validate(self):
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {list(STAGES)}")
        if self.grid_points < 16:
            raise ConfigError("grid_points must be >= 16")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.bandwidth_policy not in ("shared", "per_probe"):
            raise ConfigError("bandwidth_policy must be 'shared' or 'per_probe'")
        if self.bandwidth_method not in ("silverman", "isj"):
            raise ConfigError("bandwidth_method must be 'silverman' or 'isj'")
        if self.calib_sigma < 0:
            raise ConfigError("calib_sigma must be non-negative")
        if self.n_quad < 1 or self.n_quad % 2 == 0:
            raise ConfigError("n_quad must be a positive odd integer")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            PriorDistribution.parse(self.prior, self.n_max)
            EmConfig(
                n_max=self.n_max,
                max_iterations=self.max_iterations,
                rel_tol=self.rel_tol,
                sigma_floor=self.sigma_floor,
                init_strategy=self.init_strategy if self.init_strategy != "explicit" else "quantile_spaced",
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(mapping)
        for key in ("stages", "thermal_sweep"):
            if key in d:
                v = d[key]
                d[key] = tuple(v.split(",")) if isinstance(v, str) else tuple(v)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        d["thermal_sweep"] = list(self.thermal_sweep)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        for k in ("out", "threads", "stages"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def illuminated_rows(alpha_sq, n_max: int, min_weight: float) -> int:
    """Largest ``n`` that some probe populates with Poisson weight >= ``min_weight``."""
    f = poisson_matrix(alpha_sq, n_max).max(axis=0)
    ok = np.flatnonzero(f >= min_weight)
    return int(ok.max()) if ok.size else 0


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config.validate()
        self.out = Path(config.out)
        self.state: dict = {}
        self.inputs: dict = {}
        self.outputs: dict = {}
        self.timings: dict = {}

    # -- helpers --

    def _path(self, name):
        return self.out / name

    def _record(self, name):
        self.outputs[name] = sha256_file(self._path(name))

    def _need(self, key, loader):
        if key not in self.state:
            self.state[key] = loader()
        return self.state[key]

    def _consume(self, name):
        path = self._path(name)
        if not path.exists():
            raise FileNotFoundError(f"{name} not found in archive; run the stage that produces it")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def _traces(self):
        cfg = self.config
        if cfg.traces is None:
            raise FileNotFoundError("no trace file configured")
        self.inputs[str(Path(cfg.traces))] = sha256_file(cfg.traces)
        tf = read_traces(cfg.traces)
        return tf

    def _scores(self):
        path = self._consume("scores.csv")
        from .io import read_csv

        _, rows = read_csv(path)
        alpha = json.loads(self._consume("probes.json").read_text())["alpha_sq"]
        return {"probe": rows[:, 1].astype(int), "s1": rows[:, 2], "alpha_sq": np.asarray(alpha)}

    def _ensemble(self):
        z = load_arrays(self._consume("densities.npz"))
        smin, smax, npts = z["grid"]
        grid = OutcomeGrid(float(smin), float(smax), int(npts))
        return ProbeEnsemble(z["alpha_sq"], z["values"], grid, z["bandwidths"])

    def _model(self, name="model.json"):
        return GaussianMixturePovm.from_json(self._consume(name).read_text())

    def _table(self):
        path = self._path("marginalized.npz")
        if path.exists() or "marginalized" in self.state:
            if "marginalized" in self.state:
                return self.state["marginalized"]
            z = load_arrays(self._consume("marginalized.npz"))
            smin, smax, npts = z["grid"]
            return PovmTable(OutcomeGrid(float(smin), float(smax), int(npts)), z["theta"])
        ens = self._need("ensemble", self._ensemble)
        return mixture_to_table(self._need("model", self._model), ens.grid)

    # -- stages --

    def stage_pca(self):
        tf = self._traces()
        traces = TraceSet(tf.data, tf.labels)
        basis = fit_basis(traces, self.config.n_components)
        scores = project(traces, basis)
        save_arrays(self._path("basis.npz"), mean_trace=basis.mean_trace, components=basis.components,
                    variances=basis.variances)
        self._record("basis.npz")
        header = ["trial", "probe"] + [f"s{j + 1} (trace units)" for j in range(basis.n_components)]
        rows = ([i, int(p), *map(float, sc)] for i, (p, sc) in enumerate(zip(tf.labels, scores.scores)))
        write_csv(self._path("scores.csv"), header, rows)
        self._record("scores.csv")
        write_json(self._path("probes.json"), {"alpha_sq": tf.alpha_sq.tolist(), "ranges": tf.ranges.tolist()})
        self._record("probes.json")
        self.state["scores"] = {"probe": tf.labels, "s1": scores.scores[:, 0], "alpha_sq": tf.alpha_sq}
        return {"variances": basis.variances.tolist()}

    def stage_density(self):
        cfg = self.config
        sc = self._need("scores", self._scores)
        alpha = sc["alpha_sq"]
        sets = [sc["s1"][sc["probe"] == k] for k in range(alpha.size)]
        if any(s.size == 0 for s in sets):
            raise ValueError("a probe has no traces")
        grid = OutcomeGrid.covering(sets, cfg.grid_points)
        with ThreadPoolExecutor(cfg.threads) as pool:
            bws = np.array(list(pool.map(
                lambda x: select_bandwidth(x, cfg.bandwidth_method, floor=grid.spacing), sets)))
            if cfg.bandwidth_policy == "shared":
                bws = np.full(alpha.size, float(np.median(bws)))
            est = list(pool.map(lambda a: estimate_density(a[0], grid, a[1]), zip(sets, bws)))
        ens = ProbeEnsemble.from_estimates(alpha, est)
        save_arrays(self._path("densities.npz"), alpha_sq=ens.alpha_sq, values=ens.densities,
                    bandwidths=ens.bandwidths, grid=np.array([grid.s_min, grid.s_max, grid.n_points]))
        self._record("densities.npz")
        self.state["ensemble"] = ens
        return {"bandwidth_median": float(np.median(bws)), "grid": grid.to_dict()}

    def stage_em(self):
        cfg = self.config
        ens = self._need("ensemble", self._ensemble)
        em_cfg = EmConfig(n_max=cfg.n_max, max_iterations=cfg.max_iterations, rel_tol=cfg.rel_tol,
                          sigma_floor=cfg.sigma_floor, init_strategy=cfg.init_strategy,
                          init_efficiency=cfg.init_efficiency)
        raw, diag = em_fit(ens, em_cfg)
        err = reconstruction_error(ens, mixture_to_table(raw, ens.grid, check_coverage=False))
        # the kernel estimate broadens every peak by the (shared) bandwidth
        h = float(np.median(ens.bandwidths)) if cfg.bandwidth_policy == "shared" else 0.0
        model = deconvolve_bandwidth(raw, h, floor=diag.sigma_floor)
        self._write_model("model_raw.json", raw)
        self._write_model("model.json", model)
        pooled = pooled_peak_widths(model, diag.component_mass)
        log_doc = diag.to_dict() | {
            "reconstruction_error": err,
            "deconvolved_bandwidth": h,
            "pooled_peak_widths": [None if np.isnan(w) else float(w) for w in pooled],
            "component_mass": diag.component_mass.tolist(),
        }
        write_json(self._path("em_log.json"), log_doc)
        self._record("em_log.json")
        self.state.update(model=model, raw_model=raw, em_diag=diag)
        return {"iterations": diag.iterations, "converged": diag.converged, "reconstruction_error": err}

    def _write_model(self, name, model):
        write_json(self._path(name), model.to_dict())
        self._record(name)

    def stage_marginalize(self):
        cfg = self.config
        ens = self._need("ensemble", self._ensemble)
        model = self._need("model", self._model)
        table = marginalize_povm(model, (cfg.calib_mean, cfg.calib_sigma), ens.grid, cfg.n_quad,
                                 check_coverage=False)
        save_arrays(self._path("marginalized.npz"), theta=table.theta,
                    grid=np.array([ens.grid.s_min, ens.grid.s_max, ens.grid.n_points]),
                    row_integrals=table.row_integrals())
        self._record("marginalized.npz")
        self.state["marginalized"] = table
        return {"physical": table.is_physical()}

    def _illuminated(self):
        cfg = self.config
        ens = self._need("ensemble", self._ensemble)
        return illuminated_rows(ens.alpha_sq, cfg.n_max, cfg.efficiency_min_weight)

    def stage_efficiency(self):
        model = self._need("model", self._model)
        rows = max(self._illuminated(), 1)
        eta, curve = estimate_efficiency(model, max_n=rows)
        best = float(efficiency_objective(model, eta, rows))
        lo, hi = efficiency_interval(curve, eta, best)
        write_json(self._path("efficiency.json"), {
            "efficiency": eta,
            "rows_used": rows,
            "objective_min": best,
            "interval_factor2": [lo, hi],
            "interval_note": "eta range with objective <= 2x minimum; not a calibrated confidence interval",
        })
        self._record("efficiency.json")
        write_csv(self._path("efficiency_curve.csv"), ["eta", "objective"], curve.tolist())
        self._record("efficiency_curve.csv")
        self.state["efficiency"] = eta
        return {"efficiency": eta}

    def stage_confidence(self):
        cfg = self.config
        table = self._table()
        model = self._need("model", self._model)
        top = cfg.confidence_n_max if cfg.confidence_n_max is not None else self._illuminated()
        top = min(top, table.n_max)
        prior = PriorDistribution.parse(cfg.prior, top)
        half = cfg.window_half_width
        if half is None:
            em_log = json.loads(self._consume("em_log.json").read_text())
            widths = [w for w in em_log["pooled_peak_widths"][: top + 1] if w is not None]
            half = 2.0 * float(np.median(widths))
        window = Window.around_peaks(model, half, top)
        plain = confidence(table, prior)
        win = confidence(table, prior, window)
        centre = peak_center_confidence(table, prior, model.peak_means)
        rows = [[n, float(plain.c_values[n]), float(win.c_values[n]), float(win.acceptance_fraction[n]),
                 float(win.c_values_with_rejection[n]), float(centre[n])] for n in range(top + 1)]
        write_csv(self._path("confidence.csv"),
                  ["n", "C_n", "C_n_windowed", "acceptance_fraction", "C_n_windowed_rejection_outcome",
                   "C_n_peak_centre"], rows)
        self._record("confidence.csv")
        sweep = confidence_vs_thermal_parameter(table, cfg.thermal_sweep, top)
        write_csv(self._path("confidence_thermal.csv"), ["lambda_sq"] + [f"C_{n}" for n in range(top + 1)],
                  [[float(l2), *map(float, c)] for l2, c in zip(cfg.thermal_sweep, sweep)])
        self._record("confidence_thermal.csv")
        write_json(self._path("confidence.json"), plain.to_dict() | {"windowed": win.to_dict()})
        self._record("confidence.json")
        return {"C_n": plain.c_values.tolist()}

    # -- driver --

    def run(self, force: bool = False) -> dict:
        manifest_path = self._path("manifest.json")
        if manifest_path.exists() and not force:
            raise ArchiveExistsError(f"{self.out} already holds results; pass --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "versions": {"pnrtomo": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "config": self.config.to_dict(),
            "config_hash": self.config.digest(),
            "stages_requested": list(self.config.stages),
            "stages_completed": [],
            "status": "RUNNING",
        }
        summary = {}
        order = [s for s in STAGES if s in self.config.stages]
        try:
            for stage in order:
                t0 = time.perf_counter()
                try:
                    summary[stage] = getattr(self, f"stage_{stage}")()
                except Exception as exc:
                    manifest["failed_stage"] = stage
                    raise StageError(stage, exc) from exc
                self.timings[stage] = time.perf_counter() - t0
                manifest["stages_completed"].append(stage)
                log.info("stage %s done in %.2fs", stage, self.timings[stage])
            manifest["status"] = "OK"
        except StageError as exc:
            manifest["status"] = "FAILED"
            manifest["error"] = str(exc)
            raise
        finally:
            manifest["timings_s"] = self.timings
            manifest["inputs"] = self.inputs
            manifest["outputs"] = self.outputs
            manifest["summary"] = summary
            write_json(manifest_path, manifest)
        return manifest


def run_pipeline(config: PipelineConfig, force: bool = False) -> dict:
    return Pipeline(config).run(force=force)
