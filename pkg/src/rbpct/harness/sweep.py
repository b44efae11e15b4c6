"""Experiment sweeps: one reconstruction per (grid value, method) pair.

Layout of a report bundle::

    OUT/sweep.json                  resolved spec
    OUT/summary.csv                 one row per run
    OUT/runs/NNN_<value>_<method>/  truth.npy recon.npy truth.pgm recon.pgm curve.csv

``recon.npy`` and ``truth.npy`` hold the exact float64 arrays the summary SNR
was computed from; the PGM files are 16-bit previews clipped to [0, 1].
"""

from __future__ import annotations

import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..metrics import snr
from ..projection import GeometryError, ParallelGeometry, wedge_energy
from ..rbpdip import DivergenceError
from ..simulate import IngestionError, NoiseSpec, load_image, make_sinogram, rotate_image, save_image, shepp_logan
from ..unet import UNetConfigError
from .methods import ConfigError, canonical_method, reconstruct, validate_settings

KINDS = ("sparse-view", "limited-angle", "low-dose", "perturbation")
SUMMARY_HEADER = "# rbpct summary csv v1"
COLUMNS = ["kind", "grid_value", "method", "status", "error_code", "snr_db", "final_loss", "iterations",
           "measured_energy", "unmeasured_energy", "unmeasured_fraction", "wall_time_s", "message"]

# error codes written to the summary when a run fails
E_DIVERGED = "E_DIVERGED"
E_INPUT = "E_INPUT"
E_NUMERIC = "E_NUMERIC"
E_INTERNAL = "E_INTERNAL"


@dataclass
class SweepSpec:
    kind: str
    grid: tuple
    methods: tuple
    out_dir: str = "sweep-out"
    image: str = "shepp-logan"  # or a path to a PGM/PNG/NPY image
    size: int = 64
    views: int = 30  # used by low-dose and perturbation sweeps
    range_deg: float = 180.0
    i0: float | None = None  # photon count for kinds other than low-dose
    max_line_integral: float = 2.0  # phantom scaling applied whenever noise is simulated
    detector_count: int = 0
    detector_spacing: float = 0.5
    band_deg: float = 0.5
    seed: int = 0
    method_settings: dict = field(default_factory=dict)
    jobs: int = 1
    stable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"sweep kind must be one of {', '.join(KINDS)}")
        self.grid = tuple(float(v) for v in self.grid)
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        self.methods = tuple(canonical_method(m) for m in self.methods)
        if not self.methods:
            raise ConfigError("sweep method list is empty")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("sweep method list has duplicates")
        self.method_settings = {canonical_method(k): dict(v) for k, v in self.method_settings.items()}
        for m, s in self.method_settings.items():
            validate_settings(m, s)
        if self.size < 8 or self.views < 1 or self.jobs < 1:
            raise ConfigError("size must be >= 8, views and jobs >= 1")
        if not self.max_line_integral > 0:
            raise ConfigError("max_line_integral must be positive")
        if self.i0 is not None and not self.i0 > 0:
            raise ConfigError("i0 must be positive")
        for v in self.grid:
            _check_grid_value(self.kind, v)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("jobs")  # scheduling only; results do not depend on it
        d["grid"] = list(self.grid)
        d["methods"] = list(self.methods)
        return d


def _check_grid_value(kind: str, v: float) -> None:
    if kind == "sparse-view" and not (v >= 1 and v == int(v)):
        raise ConfigError(f"view count {v} must be a positive integer")
    if kind == "limited-angle" and not (1 <= v <= 180 and v == int(v)):
        raise ConfigError(f"angular range {v} must be a whole number of degrees in [1, 180]")
    if kind == "low-dose" and not v > 0:
        raise ConfigError(f"I0 {v} must be positive")
    if kind == "perturbation" and not math.isfinite(v):
        raise ConfigError("rotation must be finite")


def format_value(v: float) -> str:
    return str(int(v)) if v == int(v) and abs(v) < 1e15 else repr(v)


@dataclass
class SweepReport:
    out_dir: Path
    summary_path: Path
    rows: list

    def column(self, name: str, method: str | None = None) -> list:
        return [r[name] for r in self.rows if method is None or r["method"] == method]


# ------------------------------------------------------------ one run


def base_image(spec: SweepSpec) -> np.ndarray:
    if spec.image == "shepp-logan":
        return shepp_logan(spec.size)
    if str(spec.image).endswith(".npy"):
        try:
            img = np.load(spec.image)
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read {spec.image}: {exc}") from exc
        if img.ndim != 2:
            raise IngestionError("image array must be 2-D")
        return np.asarray(img, dtype=np.float64)
    return load_image(spec.image)


def run_setup(spec: SweepSpec, value: float):
    """Ground truth, geometry, sinogram and intensity scale for one grid value."""
    truth = base_image(spec)
    views, range_deg, i0 = spec.views, spec.range_deg, spec.i0
    if spec.kind == "sparse-view":
        views = int(value)
    elif spec.kind == "limited-angle":
        views, range_deg = int(value), value  # one projection per degree
    elif spec.kind == "low-dose":
        i0 = value
    else:
        truth = rotate_image(truth, value)
    geom = ParallelGeometry.uniform(views, truth.shape, range_deg, spec.detector_count, spec.detector_spacing)
    if i0 is None:
        return truth, geom, make_sinogram(truth, geom), 1.0
    peak = float(np.max(make_sinogram(truth, geom).values))
    factor = spec.max_line_integral / peak if peak > 0 else 1.0
    # reconstruct in scaled units, then divide by factor before scoring
    return truth, geom, make_sinogram(truth * factor, geom, NoiseSpec(i0, spec.seed)), factor


def _classify(exc: BaseException) -> str:
    if isinstance(exc, DivergenceError):
        return E_DIVERGED
    if isinstance(exc, (ConfigError, GeometryError, IngestionError, UNetConfigError, ValueError)):
        return E_INPUT
    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return E_NUMERIC
    return E_INTERNAL


def run_one(spec: SweepSpec, index: int, value: float, method: str) -> dict:
    run_dir = Path(spec.out_dir) / "runs" / f"{index:03d}_{format_value(value)}_{method}"
    run_dir.mkdir(parents=True, exist_ok=True)
    row = dict.fromkeys(COLUMNS, "")
    row.update(kind=spec.kind, grid_value=format_value(value), method=method)
    start = time.perf_counter()
    try:
        truth, geom, sino, factor = run_setup(spec, value)
        settings = dict(spec.method_settings.get(method, {}))
        if method != "mbir":
            settings.setdefault("seed", spec.seed)
            if settings.get("checkpoint_every"):
                settings.setdefault("checkpoint_dir", str(run_dir / "checkpoint"))
        # SNR is scale invariant, so the curve can be scored in the scaled units
        rec, run = reconstruct(method, sino, geom, settings, ground_truth=truth * factor)
        rec = rec / factor
        np.save(run_dir / "truth.npy", truth)
        np.save(run_dir / "recon.npy", rec)
        save_image(truth, run_dir / "truth.pgm")
        save_image(rec, run_dir / "recon.pgm")
        run.to_csv(run_dir / "curve.csv")
        row.update(status="ok", snr_db=repr(snr(rec, truth)), final_loss=repr(run.final_loss),
                   iterations=str(len(run.records)), message=run.status)
        if truth.shape[0] == truth.shape[1]:
            measured, unmeasured = wedge_energy(rec, geom, spec.band_deg)
            total = measured + unmeasured
            row.update(measured_energy=repr(measured), unmeasured_energy=repr(unmeasured),
                       unmeasured_fraction=repr(unmeasured / total) if total > 0 else "")
    except Exception as exc:  # recorded in the summary; the sweep carries on
        row.update(status="error", error_code=_classify(exc), message=f"{type(exc).__name__}: {exc}")
        (run_dir / "error.txt").write_text(traceback.format_exc())
    row["wall_time_s"] = f"{time.perf_counter() - start:.3f}"
    return row


def _run_task(args):
    return run_one(*args)


# -------------------------------------------------------------- sweep


def _csv_field(v: str) -> str:
    if any(ch in v for ch in ',"\n'):
        return '"' + v.replace('"', '""').replace("\n", " ") + '"'
    return v


def write_summary(rows: list, path: Path, stable: bool) -> None:
    cols = [c for c in COLUMNS if not (stable and c == "wall_time_s")]
    lines = [SUMMARY_HEADER, ",".join(cols)]
    lines += [",".join(_csv_field(str(r[c])) for c in cols) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def read_summary(path) -> list[dict]:
    import csv

    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# rbpct summary csv"):
            raise IngestionError(f"{path} is not a summary CSV")
        return list(csv.DictReader(fh))


def run_sweep(spec: SweepSpec) -> SweepReport:
    """Run every grid value for every method and write the report bundle.

    Results are identical for any ``jobs`` value; rows are ordered by grid
    value, then by method, in the order given.
    """
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    tasks = []
    for gi, value in enumerate(spec.grid):
        for mi, method in enumerate(spec.methods):
            tasks.append((spec, gi * len(spec.methods) + mi, value, method))
    if spec.jobs == 1 or len(tasks) == 1:
        rows = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            rows = list(pool.map(_run_task, tasks))
    summary = out / "summary.csv"
    write_summary(rows, summary, spec.stable)
    return SweepReport(out, summary, rows)
