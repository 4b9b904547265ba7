"""Batch front-end: config parsing, run dispatch, reference caching.

Commands
--------
solve         ground state on one mesh -> ground_state.json + report.json
study         mesh ladder vs cached fine reference -> rates.csv (+ gnuplot)
infsup        second-order audit at one ground state -> infsup.json
oracle-check  fast physics sanity oracles, no config required

Configs are JSON; every key is schema-checked before any compute and
unknown keys are rejected with their JSON-pointer path.  `--set a.b.c=v`
overrides nested keys from the command line.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

_EXIT_OK = 0
_EXIT_ERROR = 1
_EXIT_UNCONVERGED = 2


# -- config schema ---------------------------------------------------------


def _is_bool(v):
    return isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return _is_int(v) or isinstance(v, float)


def _is_str(v):
    return isinstance(v, str)


_SCF_KEYS = {
    "mixing": _is_str,
    "beta": _is_num,
    "anderson_depth": _is_int,
    "density_tol": _is_num,
    "max_iter": _is_int,
    "eig_tol": _is_num,
    "initial_guess": _is_str,
    "seed": _is_int,
    "dense_cutoff": _is_int,
    "eig_maxiter": _is_int,
}

_SYSTEM_KEYS = {
    "preset": _is_str,
    "name": _is_str,
    "L": _is_num,
    "n_electrons": _is_int,
    "nuclei": lambda v: isinstance(v, list),
    "projectors": lambda v: isinstance(v, list),
    "xc": _is_str,
    "x_alpha": _is_num,
    "hartree": _is_bool,
    "boundary_rule": _is_str,
}

_TOP_KEYS = ("system", "mesh", "study", "scf", "infsup", "output_dir", "seed")


def _check_keys(section, allowed, path, errors):
    for key, value in section.items():
        if key not in allowed:
            errors.append(f"{path}/{key}: unknown key")
        elif not allowed[key](value):
            errors.append(f"{path}/{key}: wrong type")


def _check_level(pair, path, errors):
    ok = (
        isinstance(pair, list)
        and len(pair) == 2
        and _is_int(pair[0])
        and _is_int(pair[1])
    )
    if not ok:
        errors.append(f"{path}: expected [n, degree] with integers")
        return
    if pair[0] < 2:
        errors.append(f"{path}: mesh n must be at least 2")
    if pair[1] not in (1, 2):
        errors.append(f"{path}: degree must be 1 or 2")


def validate_config(cfg, command):
    """Schema check; returns a list of 'pointer: problem' strings."""
    errors = []
    if not isinstance(cfg, dict):
        return ["/: config must be a JSON object"]
    for key in cfg:
        if key not in _TOP_KEYS:
            errors.append(f"/{key}: unknown key")
    if "output_dir" in cfg and not _is_str(cfg["output_dir"]):
        errors.append("/output_dir: wrong type")
    if "seed" in cfg and not _is_int(cfg["seed"]):
        errors.append("/seed: wrong type")

    system = cfg.get("system")
    if not isinstance(system, dict):
        if command != "oracle-check":
            errors.append("/system: required object")
    else:
        _check_keys(system, _SYSTEM_KEYS, "/system", errors)
        if "preset" in system:
            extras = sorted(set(system) - {"preset"})
            for key in extras:
                errors.append(f"/system/{key}: not allowed together with preset")
        else:
            for req in ("L", "n_electrons"):
                if req not in system:
                    errors.append(f"/system/{req}: required for inline systems")
            for i, nuc in enumerate(system.get("nuclei", [])):
                if not isinstance(nuc, dict) or set(nuc) != {
                    "position", "charge", "core_radius"
                }:
                    errors.append(
                        f"/system/nuclei/{i}: expected position/charge/core_radius"
                    )
            for i, prj in enumerate(system.get("projectors", [])):
                if not isinstance(prj, dict) or not {"center", "width", "strength"} <= set(
                    prj
                ) or not set(prj) <= {"center", "width", "strength", "kind", "axis"}:
                    errors.append(
                        f"/system/projectors/{i}: expected center/width/strength"
                        " (+ optional kind, axis)"
                    )

    if "scf" in cfg:
        if not isinstance(cfg["scf"], dict):
            errors.append("/scf: must be an object")
        else:
            _check_keys(cfg["scf"], _SCF_KEYS, "/scf", errors)
            for key in ("beta", "density_tol", "eig_tol"):
                val = cfg["scf"].get(key)
                if val is not None and _is_num(val) and val <= 0:
                    errors.append(f"/scf/{key}: must be positive")

    if command in ("solve", "infsup"):
        mesh = cfg.get("mesh")
        if not isinstance(mesh, dict):
            errors.append("/mesh: required object for this command")
        else:
            _check_keys(mesh, {"n": _is_int, "degree": _is_int}, "/mesh", errors)
            if "n" not in mesh or "degree" not in mesh:
                errors.append("/mesh: needs both n and degree")
            else:
                _check_level([mesh["n"], mesh["degree"]], "/mesh", errors)

    if command == "study":
        study = cfg.get("study")
        if not isinstance(study, dict):
            errors.append("/study: required object for this command")
        else:
            _check_keys(
                study,
                {"levels": lambda v: isinstance(v, list),
                 "reference": lambda v: isinstance(v, list),
                 "infsup_dim": _is_int},
                "/study",
                errors,
            )
            levels = study.get("levels")
            if not isinstance(levels, list) or not levels:
                errors.append("/study/levels: required non-empty list")
            else:
                for i, pair in enumerate(levels):
                    _check_level(pair, f"/study/levels/{i}", errors)
            if "reference" not in study:
                errors.append("/study/reference: required")
            else:
                _check_level(study["reference"], "/study/reference", errors)

    if "infsup" in cfg:
        if not isinstance(cfg["infsup"], dict):
            errors.append("/infsup: must be an object")
        else:
            _check_keys(cfg["infsup"], {"subspace_dim": _is_int}, "/infsup", errors)
    elif command == "infsup":
        errors.append("/infsup: required object for this command")
    return errors


def apply_overrides(cfg, assignments):
    """Apply --set dot.path=value entries; values parse as JSON when possible."""
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ValueError(f"--set path {key!r} crosses a non-object value")
            node = nxt
        node[parts[-1]] = value
    return cfg


# -- object construction ---------------------------------------------------


def system_from_config(section):
    from .physics import (
        ModelSystem,
        Nucleus,
        Projector,
        PseudoSpec,
        XcFunctional,
        make_system,
    )

    if "preset" in section:
        return make_system(section["preset"])
    nuclei = [
        Nucleus(tuple(n["position"]), float(n["charge"]), float(n["core_radius"]))
        for n in section.get("nuclei", [])
    ]
    projectors = [
        Projector(
            tuple(p["center"]), float(p["width"]), float(p["strength"]),
            p.get("kind", "s"), int(p.get("axis", 0)),
        )
        for p in section.get("projectors", [])
    ]
    xc = XcFunctional(section.get("xc", "none"), section.get("x_alpha", 0.7))
    return ModelSystem(
        section.get("name", "custom"),
        float(section["L"]),
        int(section["n_electrons"]),
        PseudoSpec(nuclei, projectors),
        xc,
        use_hartree=section.get("hartree", True),
        boundary_rule=section.get("boundary_rule", "multipole2"),
    )


def scf_from_config(cfg):
    from .ksdft import ScfConfig

    kwargs = dict(cfg.get("scf", {}))
    kwargs.setdefault("seed", cfg.get("seed", 0))
    return ScfConfig(**kwargs)


def build_id(cfg):
    from . import __version__

    digest = hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:12]
    return f"ksfem-{__version__}+cfg.{digest}"


# -- reference cache -------------------------------------------------------


def cache_dir():
    env = os.environ.get("KSFEM_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "ksfem"


def cache_reference(system, n, degree, scf_cfg):
    """Fetch or compute the reference ground state; returns (state, path, hit)."""
    from .fem import FeSpace
    from .ksdft import load_ground_state, save_ground_state, scf_solve
    from .mesh import build_uniform_mesh

    payload = json.dumps(
        [
            repr(system.token()),
            n,
            degree,
            scf_cfg.mixing,
            scf_cfg.beta,
            scf_cfg.density_tol,
            scf_cfg.eig_tol,
            scf_cfg.initial_guess,
            scf_cfg.seed,
        ],
        sort_keys=True,
    )
    key = hashlib.sha256(payload.encode()).hexdigest()[:20]
    directory = cache_dir()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"ref-{key}.json"
    if path.exists():
        try:
            return load_ground_state(path), path, True
        except Exception as exc:
            logger.warning("cache entry %s unreadable (%s); recomputing", path, exc)
    space = FeSpace(build_uniform_mesh(system.L, n), degree)
    state = scf_solve(system, space, scf_cfg)
    save_ground_state(state, path)
    return state, path, False


# -- command runners -------------------------------------------------------


def _run_solve(cfg, out, phases, report):
    from .fem import FeSpace
    from .ksdft import save_ground_state, scf_solve
    from .mesh import build_uniform_mesh

    system = system_from_config(cfg["system"])
    scf_cfg = scf_from_config(cfg)
    mesh_cfg = cfg["mesh"]
    t0 = time.perf_counter()
    space = FeSpace(build_uniform_mesh(system.L, mesh_cfg["n"]), mesh_cfg["degree"])
    phases["setup"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    gs = scf_solve(system, space, scf_cfg)
    phases["solve"] = time.perf_counter() - t0
    state_path = out / "ground_state.json"
    save_ground_state(gs, state_path)
    report["outputs"].append(str(state_path))
    report["converged"] = bool(gs.converged)
    report["total_energy"] = gs.total_energy
    report["eigenvalues"] = np.asarray(gs.eigenvalues).tolist()
    return _EXIT_OK if gs.converged else _EXIT_UNCONVERGED


def _run_study(cfg, out, phases, report):
    from .analysis import StudyError, convergence_study, write_gnuplot_script

    system = system_from_config(cfg["system"])
    scf_cfg = scf_from_config(cfg)
    study = cfg["study"]
    n_ref, deg_ref = study["reference"]
    t0 = time.perf_counter()
    ref_state, ref_path, hit = cache_reference(system, n_ref, deg_ref, scf_cfg)
    phases["reference"] = 0.0 if hit else time.perf_counter() - t0
    report["reference_cache"] = {"path": str(ref_path), "hit": hit}
    csv_path = out / "rates.csv"
    gp_path = out / "rates.gp"
    t0 = time.perf_counter()
    try:
        result = convergence_study(
            system,
            [tuple(level) for level in study["levels"]],
            (n_ref, deg_ref),
            cfg=scf_cfg,
            reference_state=ref_state,
            csv_path=csv_path,
            infsup_dim=study.get("infsup_dim"),
        )
    except StudyError as exc:
        phases["levels"] = time.perf_counter() - t0
        report["outputs"].append(str(csv_path))
        report["converged"] = False
        report["error"] = str(exc)
        return _EXIT_UNCONVERGED
    phases["levels"] = time.perf_counter() - t0
    write_gnuplot_script(csv_path.name, gp_path)
    report["outputs"] += [str(csv_path), str(gp_path)]
    report["converged"] = True
    report["slopes"] = result.slopes
    if result.gammas is not None:
        report["infsup_gammas"] = result.gammas
    return _EXIT_OK


def _run_infsup(cfg, out, phases, report):
    from .analysis import infsup_audit
    from .fem import FeSpace
    from .ksdft import scf_solve
    from .mesh import build_uniform_mesh

    system = system_from_config(cfg["system"])
    scf_cfg = scf_from_config(cfg)
    mesh_cfg = cfg["mesh"]
    dim = cfg["infsup"]["subspace_dim"]
    t0 = time.perf_counter()
    space = FeSpace(build_uniform_mesh(system.L, mesh_cfg["n"]), mesh_cfg["degree"])
    gs = scf_solve(system, space, scf_cfg)
    phases["solve"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    audit = infsup_audit(system, gs, dim)
    phases["audit"] = time.perf_counter() - t0
    payload = {
        "gamma": audit.gamma,
        "smallest_eigenvalues": np.asarray(audit.smallest_eigenvalues).tolist(),
        "subspace_dim": audit.subspace_dim,
        "positive": audit.positive,
        "converged": bool(gs.converged),
        "total_energy": gs.total_energy,
    }
    path = out / "infsup.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    report["outputs"].append(str(path))
    report["converged"] = bool(gs.converged)
    report["gamma"] = audit.gamma
    return _EXIT_OK if gs.converged else _EXIT_UNCONVERGED


def _run_oracle_check(cfg, out, phases, report):
    from scipy.special import erf

    from .fem import DensityField, FeSpace, evaluate_at_points
    from .ksdft import scf_solve
    from .mesh import build_uniform_mesh
    from .physics import XcFunctional, make_system, solve_hartree

    checks = []
    t0 = time.perf_counter()

    xc = XcFunctional("dirac_exchange")
    t = 2.0
    h = 1e-5
    fd = (xc.e(t + h) - xc.e(t - h)) / (2.0 * h)
    rel = abs(fd - xc.de(t)) / abs(xc.de(t))
    checks.append(("xc-dirac-derivative", rel < 1e-7, f"rel err {rel:.2e}"))

    pz = XcFunctional("dirac_plus_pz81")
    worst = 0.0
    for t in (0.1, 1.0, 10.0):
        h = 1e-5 * t
        fd = (pz.e(t + h) - pz.e(t - h)) / (2.0 * h)
        worst = max(worst, abs(fd - pz.de(t)) / abs(pz.de(t)))
    checks.append(("xc-pz81-derivative", worst < 1e-6, f"rel err {worst:.2e}"))

    system = make_system("harmonic")
    space = FeSpace(build_uniform_mesh(system.L, 10), 1)
    gs = scf_solve(system, space)
    err = abs(gs.eigenvalues[0] - 1.5)
    checks.append(("oscillator-eigenvalue", err < 0.4, f"lambda1 err {err:.3f}"))

    space = FeSpace(build_uniform_mesh(6.0, 8), 1)
    pts = space.quad_points(space.quad_nl)
    r2 = np.einsum("eqk,eqk->eq", pts, pts)
    rho = DensityField(space, np.pi**-1.5 * np.exp(-r2))
    hs = solve_hartree(space, rho)
    val = evaluate_at_points(
        space, hs.potential.coeffs, np.array([[2.0, 0.0, 0.0]]),
        boundary_values=hs.boundary_values,
    )[0]
    exact = erf(2.0) / 2.0
    rel = abs(val - exact) / exact
    checks.append(("hartree-gaussian", rel < 0.05, f"rel err {rel:.2e}"))

    phases["checks"] = time.perf_counter() - t0
    all_ok = True
    for name, ok, detail in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        all_ok = all_ok and bool(ok)
    report["checks"] = [
        {"name": name, "passed": bool(ok), "detail": detail}
        for name, ok, detail in checks
    ]
    report["converged"] = all_ok
    return _EXIT_OK if all_ok else _EXIT_ERROR


_RUNNERS = {
    "solve": _run_solve,
    "study": _run_study,
    "infsup": _run_infsup,
    "oracle-check": _run_oracle_check,
}


def run(argv=None):
    parser = argparse.ArgumentParser(
        prog="ksfem", description="finite-element Kohn-Sham batch runner"
    )
    parser.add_argument("command", choices=sorted(_RUNNERS))
    parser.add_argument("config", nargs="?", help="JSON config path")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value by dot path",
    )
    parser.add_argument("--output", help="output directory override")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )

    cfg = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return _EXIT_ERROR
    elif args.command != "oracle-check":
        print("error: this command requires a config file", file=sys.stderr)
        return _EXIT_ERROR

    try:
        apply_overrides(cfg, args.set)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_ERROR
    if args.output is not None:
        cfg["output_dir"] = args.output

    skip_validation = args.command == "oracle-check" and args.config is None
    if not skip_validation:
        problems = validate_config(cfg, args.command)
        if problems:
            for line in problems:
                print(f"config error: {line}", file=sys.stderr)
            return _EXIT_ERROR

    # construct solver configs up front so invalid values fail before output
    if args.command != "oracle-check":
        try:
            system_from_config(cfg["system"])
            scf_from_config(cfg)
        except (KeyError, ValueError, TypeError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return _EXIT_ERROR

    out = Path(cfg.get("output_dir", "ksfem-out"))
    out.mkdir(parents=True, exist_ok=True)
    phases = {}
    report = {
        "command": args.command,
        "config": cfg,
        "build_id": build_id(cfg),
        "outputs": [],
        "converged": None,
    }
    t_start = time.perf_counter()
    try:
        code = _RUNNERS[args.command](cfg, out, phases, report)
    except Exception as exc:
        logger.exception("run failed")
        report["error"] = f"{type(exc).__name__}: {exc}"
        code = _EXIT_ERROR
    phases["total"] = time.perf_counter() - t_start
    report["wall_times"] = phases
    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1)
    return code
