"""Command-line front end: ``tirecover <subcommand> [--config FILE] [--out DIR]``.

Every run echoes its effective configuration (defaults filled in) to
``<out>/config.json`` so the run can be repeated from that file alone.
Exit codes: 0 pass, 1 property failure, 2 configuration error, 3 numerical
failure. ``TIRECOVER_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

if "TIRECOVER_THREADS" in os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["TIRECOVER_THREADS"])

import numpy as np

from .errors import ConfigError, TIError

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SUBCOMMANDS = ("trace", "convexity", "nondegen", "audit", "invert", "qsh-extract", "verify",
               "plot-data")


# ---------------------------------------------------------------------------
# configuration


def _strict(cls, d: Optional[dict], name: str):
    """Build dataclass ``cls`` from ``d``, naming the first unknown key."""
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown field")
    try:
        return cls(**d)
    except (TypeError, ValueError) as err:
        raise ConfigError(name, str(err)) from None


@dataclass
class TraceSection:
    n_rays: int = 40
    window: float = 0.6
    dip_deg: list = field(default_factory=lambda: [6.0, 50.0])
    t_max: float = 6.0
    rtol: float = 1e-10


@dataclass
class FoliationSection:
    coefficients: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    orientation: float = 1.0
    points_per_axis: int = 3
    n_dirs: int = 16


@dataclass
class AuditSection:
    interior_points: list = field(default_factory=lambda: [[0.1, 0.0, 0.2], [-0.2, 0.1, 0.05]])
    boundary_points: list = field(default_factory=lambda: [[0.0, 0.0, 0.0], [0.3, -0.2, 0.0]])
    cases: list = field(default_factory=lambda: [["qP", "a11"], ["qP", "e2"], ["qP", "a33"]])
    resolution_deg: float = 1.0
    Lambda: float = 2.0
    digamma_ladder: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 4.0])
    tolerance: float = 1e-3
    angle_limit: float = 3.0
    margin: float = 1e-2
    fits: bool = True
    fit_directions: int = 8
    boundary_nodes: int = 512


@dataclass
class QshSection:
    n_samples: int = 1000
    patch_half_width: float = 0.3
    patch_points: int = 5
    levels: list = field(default_factory=lambda: [-0.3, -0.1, 0.1])
    residual_limit: float = 1e-6


@dataclass
class PlotSection:
    point: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    polar_case: list = field(default_factory=lambda: ["qP", "e2"])
    polar_point: list = field(default_factory=lambda: [0.1, 0.0, 0.2])
    n_angles: int = 361


@dataclass
class ExperimentConfig:
    medium: object = None
    waves: list = field(default_factory=lambda: ["qP", "qSV"])
    seed: int = 0
    output: str = "tirecover-out"
    trace: TraceSection = field(default_factory=TraceSection)
    foliation: FoliationSection = field(default_factory=FoliationSection)
    audit: AuditSection = field(default_factory=AuditSection)
    inversion: dict = field(default_factory=lambda: {"kind": "a11"})
    qsh: QshSection = field(default_factory=QshSection)
    plot: PlotSection = field(default_factory=PlotSection)

    def medium_spec(self):
        from .scenarios import MediumSpec, gradient_reference, load_medium

        if self.medium is None:
            return gradient_reference(tilt=(0.3, 0.1))
        if isinstance(self.medium, str):
            return load_medium(self.medium)
        return MediumSpec.from_dict(self.medium)

    def inversion_config(self):
        from .inversion import InversionConfig, default_config

        d = dict(self.inversion)
        if "reference" in d:
            return InversionConfig.from_dict(d)
        kind = d.pop("kind", "a11")
        cfg = default_config(kind)
        base = cfg.to_dict()
        for k, v in d.items():
            if k not in base:
                raise ConfigError(f"inversion.{k}", "unknown field")
            if isinstance(base[k], dict) and isinstance(v, dict):
                base[k] = {**base[k], **v}
            else:
                base[k] = v
        return InversionConfig.from_dict(base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["medium"] = self.medium_spec().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sections = {"trace": TraceSection, "foliation": FoliationSection, "audit": AuditSection,
                    "qsh": QshSection, "plot": PlotSection}
        for k in d:
            if k not in {f.name for f in fields(cls)}:
                raise ConfigError(k, "unknown field")
        for k, sec in sections.items():
            d[k] = _strict(sec, d.get(k), k)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        from .material import Wave

        for w in self.waves:
            try:
                Wave.parse(w)
            except ValueError:
                raise ConfigError("waves", f"unknown wave {w!r}") from None
        if isinstance(self.medium, str) and not os.path.exists(self.medium):
            raise ConfigError("medium", f"file not found: {self.medium}")
        self.medium_spec()
        if self.trace.n_rays < 1:
            raise ConfigError("trace.n_rays", "must be positive")
        if self.audit.resolution_deg <= 0:
            raise ConfigError("audit.resolution_deg", "must be positive")
        if any(g <= 0 for g in self.audit.digamma_ladder):
            raise ConfigError("audit.digamma_ladder", "entries must be positive")
        return self


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"invalid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return ExperimentConfig.from_dict(raw)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)


def _lattice(spec, n: int, inset: float = 0.2) -> np.ndarray:
    lo, hi = np.asarray(spec.domain[0], float), np.asarray(spec.domain[1], float)
    pad = inset * (hi - lo)
    axes = [np.linspace(a, b, n) for a, b in zip(lo + pad, hi - pad)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# subcommands; each returns (passed, summary)


def cmd_trace(cfg: ExperimentConfig, out: str):
    from .integrate import Tolerance
    from .inversion import FanSpec, fan_candidates
    from .raytrace import ShootingSpec, box_surfaces, lens_relation, write_lens_csv

    spec = cfg.medium_spec()
    m = spec.build()
    t = cfg.trace
    fan = FanSpec(n_rays=t.n_rays, window=t.window, dip_deg=tuple(t.dip_deg), seed=cfg.seed,
                  oversample=1.0, t_max=t.t_max)
    summary = {}
    ok = True
    for w in cfg.waves:
        x0, xi0 = fan_candidates(m, spec, w, fan)
        shoot = ShootingSpec(x0, xi0, box_surfaces(*spec.domain), t.t_max)
        good, bad = lens_relation(m, w, shoot, Tolerance(t.rtol, t.rtol * 1e-2))
        write_lens_csv(os.path.join(out, f"lens_{w}.csv"), good + bad)
        summary[w] = {"rays": len(x0), "exited": len(good), "failed": len(bad)}
        ok &= not bad
    return ok, summary


def cmd_convexity(cfg: ExperimentConfig, out: str):
    from .fields import Linear
    from .raytrace import convexity_scan

    spec = cfg.medium_spec()
    m = spec.build()
    f = cfg.foliation
    fol = Linear(f.coefficients)
    pts = _lattice(spec, f.points_per_axis)
    summary, ok = {}, True
    for w in cfg.waves:
        rep = convexity_scan(m, w, fol, pts, f.n_dirs, f.orientation)
        write_json(os.path.join(out, f"convexity_{w}.json"), rep.to_dict())
        summary[w] = {"passed": rep.passed, "margin": rep.margin}
        ok &= rep.passed
    return ok, summary


def cmd_nondegen(cfg: ExperimentConfig, out: str):
    from .fields import Linear
    from .raytrace import nondegeneracy_probe

    spec = cfg.medium_spec()
    m = spec.build()
    fol = Linear(cfg.foliation.coefficients)
    pts = _lattice(spec, cfg.foliation.points_per_axis)
    summary, ok = {}, True
    for w in cfg.waves:
        reps = [nondegeneracy_probe(m, w, p, fol, cfg.foliation.n_dirs) for p in pts]
        passed = all(r.passed for r in reps)
        write_json(os.path.join(out, f"nondegen_{w}.json"),
                   {"points": pts, "reports": [r.to_dict() for r in reps], "passed": passed})
        summary[w] = {"passed": passed, "flagged": sum(len(r.flagged) for r in reps)}
        ok &= passed
    return ok, summary


def _axis_hypothesis(m, z, tol=1e-8):
    """Problems with the axis relative to the boundary ``x3 = 0`` at ``z``."""
    a = m.axis(np.atleast_2d(z))[0]
    a = a / np.linalg.norm(a)
    issues = []
    if np.linalg.norm(a[:2]) < tol:
        issues.append("axis orthogonal to the boundary")
    if abs(a[2]) < tol:
        issues.append("axis parallel to the boundary")
    return issues


def cmd_audit(cfg: ExperimentConfig, out: str):
    from . import symbols as S

    spec = cfg.medium_spec()
    m = spec.build()
    a = cfg.audit
    cut = S.Cutoff(a.Lambda)
    grid = S.zeta_grid(a.resolution_deg)
    records, ok = [], True
    for wave, l in a.cases:
        for kind, pts in (("interior", a.interior_points), ("boundary", a.boundary_points)):
            for k, z in enumerate(pts):
                z = np.asarray(z, float)
                rep = S.degeneracy_scan(m, wave, l, z, cut, a.resolution_deg, a.tolerance,
                                        a.angle_limit, S.standard_symbol_grid(m, wave, l, z, cut, zetas=grid))
                rec = {"kind": kind, "wave": wave, "parameter": l, "z": z, "margin": rep.margin}
                issues = _axis_hypothesis(m, z)
                if l == "a11":
                    passed = rep.margin >= a.margin
                else:
                    passed = rep.localized and not issues
                    if a.fits and rep.localized:
                        for d in S.transversal_directions(rep.reference, a.fit_directions):
                            try:
                                fit = S.quadratic_fit(m, wave, l, z, d, cut)
                                rep.fits.append(fit.to_dict())
                                passed &= 1.9 <= fit.exponent <= 2.1 and fit.coefficient > 0
                            except TIError as err:
                                rep.fits.append({"error": str(err)})
                                passed = False
                rec.update(passed=passed, localized=rep.localized, issues=issues,
                           degenerate_max_angle_deg=rep.to_dict()["degenerate_max_angle_deg"])
                stem = f"symbol_{wave}_{l}_{kind}{k}"
                rep.write_json(os.path.join(out, stem + ".json"))
                rep.write_csv(os.path.join(out, stem + ".csv"))
                records.append(rec)
                ok &= passed
        for k, z in enumerate(a.boundary_points):
            z = np.asarray(z, float)
            issues = _axis_hypothesis(m, z)
            for dg in a.digamma_ladder:
                try:
                    vals = S.boundary_symbol_finite(m, wave, l, z, grid, dg, a.boundary_nodes)
                    top = float(np.max(np.abs(vals)))
                    lo, hi = float(vals.min()), float(vals.max())
                    strict = top > 0 and (lo > a.tolerance * top or hi < -a.tolerance * top)
                    rec = {"kind": "boundary_symbol", "wave": wave, "parameter": l, "z": z,
                           "digamma": dg, "min": lo, "max": hi, "sign": int(np.sign(hi + lo)),
                           "passed": bool(strict and not issues), "issues": issues}
                except TIError as err:
                    rec = {"kind": "boundary_symbol", "wave": wave, "parameter": l, "z": z,
                           "digamma": dg, "passed": False, "issues": issues + [str(err)]}
                records.append(rec)
                ok &= rec["passed"]
    write_json(os.path.join(out, "audit.json"), {"passed": ok, "records": records})
    failed = [r for r in records if not r["passed"]]
    return ok, {"checks": len(records), "failed": len(failed)}


def cmd_invert(cfg: ExperimentConfig, out: str, threshold: float = 0.05):
    from .inversion import run_experiment

    icfg = cfg.inversion_config()
    write_json(os.path.join(out, "inversion_config.json"), icfg.to_dict())
    exp = run_experiment(icfg)
    exp.write(out)
    errs = {k: v["rel_L2"] for k, v in exp.metrics["errors"].items()}
    ok = all(v < threshold for v in errs.values())
    return ok, {"rel_L2": errs, "threshold": threshold}


def cmd_qsh_extract(cfg: ExperimentConfig, out: str):
    from .qsh import SeedPatch, build_adapted_coordinates, extract_parameters, qsh_metric_field

    spec = cfg.medium_spec()
    m = spec.build()
    q = cfg.qsh
    rng = np.random.default_rng(cfg.seed)
    lo, hi = np.asarray(spec.domain[0], float), np.asarray(spec.domain[1], float)
    pts = rng.uniform(lo, hi, (q.n_samples, 3))
    G = qsh_metric_field(m)(pts)
    alpha, beta = 1.0 / m.a66(pts), 1.0 / m.a55(pts)
    axis = m.axis(pts)
    axis = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    worst = 0.0
    with open(os.path.join(out, "extraction.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "x3", "alpha", "beta", "w1", "w2", "w3", "error"])
        for x, g, a, b, ax in zip(pts, G, alpha, beta, axis):
            ex = extract_parameters(g)
            err = max(abs(ex.alpha - a) / a, abs(ex.beta - b) / b,
                      min(np.linalg.norm(ex.axis_span - ax), np.linalg.norm(ex.axis_span + ax)))
            worst = max(worst, err)
            w.writerow([f"{v:.12g}" for v in (*x, ex.alpha, ex.beta, *ex.axis_span, err)])
    centre = 0.5 * (lo + hi)
    ys = np.linspace(-q.patch_half_width, q.patch_half_width, q.patch_points)
    seed = SeedPatch(centre, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), ys, ys)
    chart = build_adapted_coordinates(m, seed, q.levels)
    chart.write_csv(os.path.join(out, "adapted_chart.csv"))
    ok = worst <= 1e-9 and chart.max_residual < q.residual_limit
    return ok, {"extraction_max_error": worst, "chart_max_residual": chart.max_residual}


def cmd_verify(cfg: ExperimentConfig, out: str):
    from .checks import run_battery

    results = run_battery(cfg.seed)
    ok = all(r.passed for r in results)
    write_json(os.path.join(out, "verify.json"),
               {"passed": ok, "suites": [r.to_dict() for r in results]})
    return ok, {r.name: "PASS" if r.passed else "FAIL" for r in results}


def slowness_sections(m, x, n_angles: int = 361, waves=("qP", "qSV", "qSH")):
    """Rows ``(wave, angle, xi1, xi3, slowness)`` over a covector circle in the x1-x3 plane."""
    from .material import hamiltonian

    ang = np.linspace(0.0, 360.0, n_angles)
    dirs = np.stack([np.cos(np.deg2rad(ang)), np.zeros(n_angles), np.sin(np.deg2rad(ang))], axis=1)
    xs = np.tile(np.asarray(x, float), (n_angles, 1))
    rows = []
    for w in waves:
        s = 1.0 / np.sqrt(hamiltonian(m, w, xs, dirs))
        rows += [(w, a, s_ * d[0], s_ * d[2], s_) for a, d, s_ in zip(ang, dirs, s)]
    return rows


def write_report_csv(path, report: dict):
    """Flatten the degenerate directions of a symbol report; header only if none."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zeta3", "zeta1", "zeta2"])
        for d in report.get("degenerate_directions", []) if report else []:
            w.writerow([f"{v:.12g}" for v in d])


def cmd_plot_data(cfg: ExperimentConfig, out: str, reports=()):
    from . import symbols as S

    m = cfg.medium_spec().build()
    p = cfg.plot
    with open(os.path.join(out, "slowness_sections.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wave", "angle_deg", "xi1", "xi3", "slowness"])
        for r in slowness_sections(m, p.point, p.n_angles):
            w.writerow([r[0]] + [f"{v:.12g}" for v in r[1:]])
    wave, l = p.polar_case
    z = np.asarray(p.polar_point, float)
    ref = S.degenerate_direction(m, z)
    e1 = S.transversal_directions(ref, 1)[0]
    ang = np.linspace(0.0, 360.0, p.n_angles)
    t = np.deg2rad(ang)
    zetas = np.cos(t)[:, None] * ref + np.sin(t)[:, None] * e1
    cut = S.Cutoff(cfg.audit.Lambda)
    table = S.SymbolTable.build(m, wave, l, z, cut)
    # the table covers one hemisphere; S is even
    flip = zetas[:, 0] < 0
    vals = S.symbol_on_grid(table, np.where(flip[:, None], -zetas, zetas), cut)
    vals = vals / np.max(np.abs(vals))
    with open(os.path.join(out, f"degeneracy_polar_{wave}_{l}.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg", "zeta3", "zeta1", "zeta2", "value"])
        for a, zz, v in zip(ang, zetas, vals):
            w.writerow([f"{a:.6g}"] + [f"{c:.12g}" for c in zz] + [f"{v:.12g}"])
    for path in reports:
        try:
            with open(path) as fh:
                text = fh.read().strip()
            rep = json.loads(text) if text else {}
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError("report", f"cannot read {path}: {err}") from None
        stem = os.path.splitext(os.path.basename(path))[0]
        write_report_csv(os.path.join(out, f"{stem}_degenerate.csv"), rep)
    return True, {"files": sorted(os.listdir(out))}


COMMANDS = {"trace": cmd_trace, "convexity": cmd_convexity, "nondegen": cmd_nondegen,
            "audit": cmd_audit, "invert": cmd_invert, "qsh-extract": cmd_qsh_extract,
            "verify": cmd_verify, "plot-data": cmd_plot_data}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tirecover", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    ap.add_argument("--out", help="output directory (overrides config 'output')")
    ap.add_argument("--seed", type=int, help="random seed (overrides config 'seed')")
    ap.add_argument("--report", action="append", default=[],
                    help="plot-data: symbol report JSON to flatten (repeatable)")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out = args.out or cfg.output
        os.makedirs(out, exist_ok=True)
        write_json(os.path.join(out, "config.json"), cfg.to_dict())
        fn = COMMANDS[args.command]
        if args.command == "plot-data":
            passed, summary = fn(cfg, out, args.report)
        else:
            passed, summary = fn(cfg, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TIError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"numerical failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    status = "PASS" if passed else "FAIL"
    print(json.dumps({"command": args.command, "status": status, **summary},
                     sort_keys=True, default=_json_default))
    return EXIT_PASS if passed else EXIT_FAIL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
