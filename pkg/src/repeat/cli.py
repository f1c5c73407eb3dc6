"""Command line entry point: ``repeat run | phantom | jacobian | overlay``.

``run`` executes the whole measurement and persists every intermediate
(deformation field, Jacobian map, overlays, cost history) next to the JSON
report so a result can be reviewed without re-running it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .deformation import jacobian_determinant_field
from .errors import ConfigError, GeometryMismatch, IndexOutOfRange, IoFailure, RepeatError
from .grid_ops import (
    LIVER_WINDOW,
    dilate_mask,
    gaussian_smooth,
    resample_to_geometry,
    resample_to_spacing,
    window_intensity,
)
from .phantom import (
    PhantomSpec,
    Polynomial,
    Translation,
    UniformScale,
    generate_phantom,
    respiratory_for_target,
    synthesize_pair,
)
from .registration import Metric, RegistrationConfig, center_of_mass_init, register
from .volume_change import VolumeChangeReport, fov_valid_mask, measure_partial_volume_change
from .volume_io import ImageVolume, Kind, read_field, read_nifti, write_field, write_jacobian, write_nifti

log = logging.getLogger("repeat")

REPORT_NAME = "report.json"
COST_HISTORY_NAME = "cost_history.csv"
FIELD_NAME = "deformation_field.nii.gz"
JACOBIAN_NAME = "jacobian.nii.gz"
QC_NAME = "qc_summary.png"
CONTOUR_RGB = (255, 64, 0)
AXIS_NAMES = ("sagittal", "coronal", "axial")
MASK_GEOMETRY_TOL = 1e-3

REPORT_SCHEMA = {
    "type": "object",
    "required": ["v_fixed_ml", "v_mapped_ml", "delta_percent", "coverage_fraction",
                 "folding_fraction", "n_voxels", "voxel_volume_ml", "fixed_phase",
                 "moving_phase", "config_digest", "cost_history_path"],
    "properties": {
        "v_fixed_ml": {"type": "number", "exclusiveMinimum": 0},
        "v_mapped_ml": {"type": "number"},
        "delta_percent": {"type": "number"},
        "coverage_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "folding_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "n_voxels": {"type": "integer", "minimum": 1},
        "voxel_volume_ml": {"type": "number", "exclusiveMinimum": 0},
        "fixed_phase": {"enum": ["inspiration", "expiration"]},
        "moving_phase": {"enum": ["inspiration", "expiration"]},
        "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "cost_history_path": {"type": "string"},
        "created_utc": {"type": "string"},
    },
}


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of ``repeat run``; all defaults are listed by ``--help``."""

    registration: RegistrationConfig = RegistrationConfig()
    window_lo: float = LIVER_WINDOW[0]
    window_hi: float = LIVER_WINDOW[1]
    # HU-space smoothing applied to both scans before windowing
    presmooth_sigma: float = 1.0
    resample_spacing: float = 2.0
    fov_margin: float = 1.0
    max_folding: float = 0.01
    swap_phases: bool = False
    # restrict metric sampling to the liver mask dilated by this many mm
    sample_in_mask: bool = False
    mask_dilation_mm: float = 10.0

    def __post_init__(self):
        if not self.window_lo < self.window_hi:
            raise ConfigError("window_lo must be below window_hi")
        if self.resample_spacing <= 0:
            raise ConfigError("resample_spacing must be positive")
        if self.presmooth_sigma < 0 or self.fov_margin < 0 or self.mask_dilation_mm < 0:
            raise ConfigError("presmooth_sigma, fov_margin and mask_dilation_mm must be non-negative")
        if not 0 <= self.max_folding <= 1:
            raise ConfigError("max_folding must lie in [0, 1]")

    def as_flat_dict(self) -> dict:
        out = {}
        for f in fields(RegistrationConfig):
            value = getattr(self.registration, f.name)
            out[f.name] = value.value if isinstance(value, Metric) else value
        for f in fields(self):
            if f.name != "registration":
                out[f.name] = getattr(self, f.name)
        return out

    def digest(self) -> str:
        canonical = json.dumps(self.as_flat_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _defaults() -> dict:
    return PipelineConfig().as_flat_dict()


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r}") from None
    return text.lower() if key in ("metric", "optimizer") else text


def build_config(values: Optional[dict] = None) -> PipelineConfig:
    """Validate a flat ``{key: value}`` mapping; unknown keys are rejected."""
    values = dict(values or {})
    defaults = _defaults()
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = {**defaults, **values}
    reg_names = {f.name for f in fields(RegistrationConfig)}
    try:
        reg = RegistrationConfig(**{k: v for k, v in merged.items() if k in reg_names})
        return PipelineConfig(reg, **{k: v for k, v in merged.items() if k not in reg_names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> PipelineConfig:
    """``key = value`` per line; ``#`` starts a comment."""
    defaults = _defaults()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value, defaults[key])
    return build_config(values)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


# --------------------------------------------------------------------------- run


@dataclass
class PipelineResult:
    report: VolumeChangeReport
    registration: object
    jacobian: object
    valid: ImageVolume
    fixed: ImageVolume
    mask: ImageVolume


def _mask_on_grid(mask: ImageVolume, fixed: ImageVolume) -> ImageVolume:
    if mask.geometry.isclose(fixed.geometry, MASK_GEOMETRY_TOL):
        return mask
    warnings.warn(f"liver mask grid differs from the fixed grid by "
                  f"{mask.geometry.max_difference(fixed.geometry):.3g}; resampling nearest-neighbour",
                  stacklevel=3)
    return resample_to_geometry(mask, fixed.geometry)


def _prepare(vol: ImageVolume, config: PipelineConfig):
    smooth = gaussian_smooth(vol, config.presmooth_sigma)
    hu = resample_to_spacing(smooth, config.resample_spacing)
    return hu, window_intensity(hu, config.window_lo, config.window_hi)


def run_pipeline(fixed: ImageVolume, moving: ImageVolume, mask: ImageVolume,
                 config: PipelineConfig = PipelineConfig(), workers: int = 1) -> PipelineResult:
    """In-memory pipeline; ``fixed``/``moving`` are HU volumes, ``mask`` lives on ``fixed``."""
    if fixed.is_mask or moving.is_mask:
        raise GeometryMismatch("fixed and moving inputs must be intensity volumes")
    if not mask.is_mask:
        mask = mask.replace_data((mask.data > 0.5).astype(float), Kind.MASK, 0.0)
    mask = _mask_on_grid(mask, fixed)
    fixed_hu, fixed_w = _prepare(fixed, config)
    moving_hu, moving_w = _prepare(moving, config)
    mask_w = resample_to_spacing(mask, config.resample_spacing)
    sample_mask = dilate_mask(mask_w, config.mask_dilation_mm) if config.sample_in_mask else None
    init = center_of_mass_init(fixed_hu, moving_hu)
    result = register(fixed_w, moving_w, config.registration, sample_mask, workers, init)
    jac = jacobian_determinant_field(result.field)
    valid = fov_valid_mask(result.field, moving_w.geometry, config.fov_margin)
    phases = ("expiration", "inspiration") if config.swap_phases else ("inspiration", "expiration")
    report = measure_partial_volume_change(mask_w, jac, valid, config.max_folding, config.digest())
    report = dataclasses.replace(report, fixed_phase=phases[0], moving_phase=phases[1])
    return PipelineResult(report, result, jac, valid, fixed_w, mask_w)


def write_cost_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "level", "iteration", "metric", "bending"])
        for rec in history:
            writer.writerow([rec.stage, rec.level, rec.iteration, repr(float(rec.metric)),
                             repr(float(rec.bending))])


def report_payload(report: VolumeChangeReport, deterministic: bool) -> dict:
    payload = report.to_dict()
    payload["cost_history_path"] = COST_HISTORY_NAME
    if not deterministic:
        payload["created_utc"] = datetime.datetime.now(datetime.timezone.utc).isoformat(
            timespec="seconds")
    return payload


def validate_report(payload: dict) -> None:
    import jsonschema

    jsonschema.validate(payload, REPORT_SCHEMA)


def dump_report(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _liver_center_index(mask: ImageVolume):
    idx = np.argwhere(mask.data > 0)
    if idx.size == 0:
        return tuple(d // 2 for d in mask.dims)
    return tuple(int(round(v)) for v in idx.mean(axis=0))


def write_outputs(result: PipelineResult, out_dir: Path, deterministic: bool) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cost_history(result.registration.cost_history, out_dir / COST_HISTORY_NAME)
    write_field(result.registration.field, out_dir / FIELD_NAME)
    write_jacobian(result.jacobian, out_dir / JACOBIAN_NAME)
    center = _liver_center_index(result.mask)
    for axis, name in enumerate(AXIS_NAMES):
        save_png(overlay_image(result.fixed, result.mask, axis, center[axis], (0.0, 1.0)),
                 out_dir / f"overlay_{name}.png")
    qc_figure(result, out_dir / QC_NAME)
    payload = report_payload(result.report, deterministic)
    validate_report(payload)
    (out_dir / REPORT_NAME).write_text(dump_report(payload))
    return payload


def qc_figure(result: PipelineResult, path) -> None:
    """Cost traces, det J histogram over the measured region and a det J slice."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    history = result.registration.cost_history
    region = (result.mask.data > 0) & (result.valid.data > 0)
    det = result.jacobian.det
    k = _liver_center_index(result.mask)[2]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for stage in ("affine", "ffd"):
        levels = sorted({r.level for r in history if r.stage == stage})
        for level in levels:
            costs = [r.metric for r in history if r.stage == stage and r.level == level]
            axes[0].plot(costs, label=f"{stage} L{level}")
    axes[0].set_xlabel("accepted step")
    axes[0].set_ylabel("metric")
    axes[0].legend(fontsize=7)
    axes[1].hist(det[region], bins=60, color="0.3")
    axes[1].axvline(1.0, color="k", lw=0.8)
    axes[1].set_xlabel("det J (liver, shared FOV)")
    rep = result.report
    axes[1].set_title(f"delta {rep.delta_percent:+.2f}%  coverage {rep.coverage_fraction:.2f}")
    im = axes[2].imshow(det[:, :, k].T, origin="lower", cmap="coolwarm", vmin=0.8, vmax=1.2)
    axes[2].contour((result.mask.data[:, :, k] > 0).T, levels=[0.5], colors="k", linewidths=0.8)
    axes[2].set_title(f"det J, axial slice {k}")
    fig.colorbar(im, ax=axes[2], shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


# ----------------------------------------------------------------------- overlay


def _slice(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    # rows run along the later remaining axis, top row = highest index
    return np.take(data, index, axis=axis).T[::-1]


def overlay_image(vol: ImageVolume, mask: Optional[ImageVolume], axis: int, index: int,
                  window=LIVER_WINDOW) -> np.ndarray:
    """8-bit RGB slice of ``vol`` with the in-plane mask boundary painted."""
    if axis not in (0, 1, 2):
        raise IndexOutOfRange(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= index < vol.dims[axis]:
        raise IndexOutOfRange(f"slice {index} outside 0..{vol.dims[axis] - 1} on axis {axis}")
    lo, hi = window
    gray = np.clip((_slice(vol.data, axis, index) - lo) / (hi - lo), 0.0, 1.0)
    gray = np.round(gray * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if mask is not None:
        if not mask.geometry.isclose(vol.geometry, MASK_GEOMETRY_TOL):
            raise GeometryMismatch("overlay mask must share the volume grid")
        inside = _slice(mask.data, axis, index) > 0
        # the image border counts as outside, so a full mask is outlined
        interior = ndimage.binary_erosion(inside, border_value=0)
        rgb[inside & ~interior] = CONTOUR_RGB
    return rgb


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path)


# ------------------------------------------------------------------------ phantom


def make_warp(kind: str, mask: ImageVolume, args) -> object:
    center = tuple(args.center) if args.center is not None else tuple(PhantomSpec().liver_center)
    if kind == "identity":
        return Translation()
    if kind == "translate":
        return Translation(tuple(args.offset))
    if kind == "scale":
        return UniformScale(args.factor, center)
    if kind == "poly":
        q = np.asarray(args.coefficients, dtype=float).reshape(3, 3)
        return Polynomial(tuple(map(tuple, q)), center)
    if kind == "respiratory":
        return respiratory_for_target(mask, args.target)
    raise ConfigError(f"unknown phantom kind {kind!r}")


def phantom_files(kind: str, spec: PhantomSpec, out_dir: Path, args) -> dict:
    spec.validate()
    phantom, mask = generate_phantom(spec)
    warp = make_warp(kind, mask, args)
    fixed, moving, truth = synthesize_pair(phantom, mask, warp)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(fixed, out_dir / "fixed.nii.gz")
    write_nifti(moving, out_dir / "moving.nii.gz")
    write_nifti(mask, out_dir / "liver_mask.nii.gz")
    info = {
        "kind": kind,
        "ground_truth_percent": float(truth),
        "warp": {"type": warp.kind, **warp.params()},
        "phantom": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in dataclasses.asdict(spec).items()},
    }
    (out_dir / "truth.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


# --------------------------------------------------------------------------- main


def _config_help() -> str:
    lines = ["config file keys (key = value, '#' comments):"]
    for key, value in _defaults().items():
        lines.append(f"  {key} = {value}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repeat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="measure the partial liver volume change of a scan pair",
                         epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("--fixed", required=True, help="inspiration scan (NIfTI, HU)")
    run.add_argument("--moving", required=True, help="expiration scan (NIfTI, HU)")
    run.add_argument("--mask", required=True, help="liver mask on the fixed grid")
    run.add_argument("--config", help="key = value config file")
    run.add_argument("--out-dir", required=True)
    run.add_argument("--swap-phases", action="store_true",
                     help="use the expiration scan as the fixed image (mask must be on it)")
    run.add_argument("--deterministic", action="store_true", help="omit the report timestamp")
    run.add_argument("--workers", type=int, default=1, help="threads for metric evaluation")

    ph = sub.add_parser("phantom", help="write a synthetic scan pair with known volume change")
    ph.add_argument("--kind", required=True,
                    choices=["identity", "translate", "scale", "poly", "respiratory"])
    ph.add_argument("--out-dir", required=True)
    ph.add_argument("--noise", type=float, default=PhantomSpec.noise_sigma, help="noise sigma HU")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--dims", type=int, nargs=3, default=list(PhantomSpec.dims))
    ph.add_argument("--spacing", type=float, nargs=3, default=list(PhantomSpec.spacing))
    ph.add_argument("--offset", type=float, nargs=3, default=[0.0, 0.0, 7.0],
                    help="translate: displacement mm")
    ph.add_argument("--factor", type=float, default=1.05, help="scale: linear factor")
    ph.add_argument("--center", type=float, nargs=3, help="scale/poly centre mm (liver centre)")
    ph.add_argument("--coefficients", type=float, nargs=9,
                    default=[2e-4, 0, 0, 0, 1e-4, 0, 0, 0, 1.5e-4],
                    help="poly: 3x3 quadratic coefficients per mm, row-major")
    ph.add_argument("--target", type=float, default=8.0, help="respiratory: volume change %%")

    jac = sub.add_parser("jacobian", help="det J map of a deformation-field NIfTI")
    jac.add_argument("--field", required=True)
    jac.add_argument("--out", required=True)

    ov = sub.add_parser("overlay", help="PNG slice with the mask contour")
    ov.add_argument("--volume", required=True)
    ov.add_argument("--mask")
    ov.add_argument("--axis", type=int, default=2, choices=[0, 1, 2])
    ov.add_argument("--index", type=int, required=True)
    ov.add_argument("--window", type=float, nargs=2, default=list(LIVER_WINDOW))
    ov.add_argument("--out", required=True)
    return parser


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.swap_phases:
        config = dataclasses.replace(config, swap_phases=True)
    fixed_path, moving_path = (args.moving, args.fixed) if config.swap_phases else (args.fixed, args.moving)
    fixed = read_nifti(fixed_path, Kind.INTENSITY)
    moving = read_nifti(moving_path, Kind.INTENSITY)
    mask = read_nifti(args.mask, Kind.MASK)
    result = run_pipeline(fixed, moving, mask, config, workers=args.workers)
    payload = write_outputs(result, Path(args.out_dir), args.deterministic)
    print(dump_report(payload), end="")
    return 0


def cmd_phantom(args) -> int:
    spec = PhantomSpec(dims=tuple(args.dims), spacing=tuple(args.spacing),
                       noise_sigma=args.noise, seed=args.seed)
    info = phantom_files(args.kind, spec, Path(args.out_dir), args)
    print(json.dumps({"kind": info["kind"], "ground_truth_percent": info["ground_truth_percent"]}))
    return 0


def cmd_jacobian(args) -> int:
    write_jacobian(jacobian_determinant_field(read_field(args.field)), args.out)
    return 0


def cmd_overlay(args) -> int:
    vol = read_nifti(args.volume, Kind.INTENSITY)
    mask = read_nifti(args.mask, Kind.MASK) if args.mask else None
    save_png(overlay_image(vol, mask, args.axis, args.index, tuple(args.window)), args.out)
    return 0


COMMANDS = {"run": cmd_run, "phantom": cmd_phantom, "jacobian": cmd_jacobian,
            "overlay": cmd_overlay}


def _error_json(exc: Exception, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RepeatError as exc:
        print(_error_json(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(_error_json(exc, 2), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
