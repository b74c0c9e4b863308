"""Command-line front end: ``basecase``, ``stage`` and ``verify``.

Exit codes: 0 success, 1 a checked invariant failed, 2 invalid input,
3 I/O error, 4 solver abort (blow-up, CFL or geometric-ball violation).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from typing import Callable

import numpy as np

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_ABORT = 4

# Test hook: names a suite whose ingredients are deliberately corrupted.
CORRUPT_ENV = "SQGNASH_VERIFY_CORRUPT"

log = logging.getLogger("sqgnash")


class _Invalid(Exception):
    pass


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _prepare_out(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")


def _write_meta(path: str, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k} = {v}\n")


def _read_meta(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def _write_snapshots(out: str, triple, stride: int) -> list[str]:
    from .grid_spectral import write_sqgf

    names = []
    for i in range(0, len(triple), stride):
        tag = f"{i:05d}"
        write_sqgf(os.path.join(out, f"theta_{tag}.sqgf"), triple.theta[i])
        write_sqgf(os.path.join(out, f"R_{tag}.sqgf"), triple.R[i])
        names.append(tag)
    with open(os.path.join(out, "samples.csv"), "w") as fh:
        fh.write("index,t\n")
        for i in range(0, len(triple), stride):
            fh.write(f"{i},{float(triple.times[i])!r}\n")
    return names


# ---------------------------------------------------------------------------
# basecase
# ---------------------------------------------------------------------------


def cmd_basecase(args) -> int:
    from .grid_spectral import Grid
    from .iteration_engine import IterationParams, ResolutionError, base_case

    try:
        grid = Grid(args.n)
        params = IterationParams(override_lambdas=(args.lambda0, max(args.lambda0 + 1, 8 * args.lambda0)),
                                 n=args.n, base_delta=args.delta0)
        triple = base_case(params, grid)
    except (ValueError, ResolutionError) as exc:
        raise _Invalid(str(exc)) from exc
    _prepare_out(args.out)
    res = triple.residual_norms()
    interior = res[2:-2]
    _write_snapshots(args.out, triple, args.stride)
    with open(os.path.join(args.out, "residual.csv"), "w") as fh:
        fh.write("t,residual\n")
        for t, r in zip(triple.times, res):
            fh.write(f"{float(t)!r},{float(r)!r}\n")
    _write_meta(os.path.join(args.out, "meta.txt"), {
        "kind": "base", "n": args.n, "lambda0": args.lambda0, "delta0": repr(args.delta0),
        "count": len(triple), "t0": repr(float(triple.times[0])), "dt": repr(triple.theta.dt),
        "residual_max": repr(float(interior.max())),
    })
    ok = float(interior.max()) < 1e-8
    print(f"basecase residual_max {interior.max():.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# stage
# ---------------------------------------------------------------------------


def cmd_stage(args) -> int:
    from .flow_transport import CFLViolation, SolverBlowUp
    from .grid_spectral import Grid
    from .iteration_engine import GeometricBallError, InductiveCheckError, IterationParams, base_case, run_stage

    meta_path = os.path.join(args.input, "meta.txt")
    if not os.path.isfile(meta_path):
        raise _Invalid(f"no input triple found in {args.input} (missing meta.txt)")
    if not os.path.isfile(args.params):
        raise _Invalid(f"parameter file {args.params} not found")
    meta = _read_meta(meta_path)
    if meta.get("kind") != "base":
        raise _Invalid("stage input must be a base-case directory written by 'basecase'")
    try:
        params = IterationParams.from_file(args.params)
        lam0 = int(meta["lambda0"])
        changes = {"base_delta": float(meta["delta0"]), "q": 0}
        if args.override_lambda is not None:
            changes["override_lambdas"] = tuple(args.override_lambda)
        params = params.with_changes(**changes)
        if params.lambda_q != lam0:
            raise ValueError(f"input triple has lambda0 = {lam0} but the parameters give lambda_q = {params.lambda_q}")
        if params.n != int(meta["n"]):
            params = params.with_changes(n=int(meta["n"]))
        triple = base_case(params, Grid(params.n))
    except (ValueError, KeyError) as exc:
        raise _Invalid(str(exc)) from exc
    _prepare_out(args.out)
    for msg in params.ordering_warnings():
        log.warning("parameter ordering: %s", msg)
    try:
        new, report = run_stage(triple, override=args.override_checks, workdir=args.workdir, progress=args.verbose)
    except InductiveCheckError as exc:
        raise _Invalid(str(exc)) from exc
    except (SolverBlowUp, CFLViolation, GeometricBallError) as exc:
        print(f"solver abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    report.write_csv(os.path.join(args.out, "stage_report.csv"))
    _write_snapshots(args.out, new, args.stride)
    with open(os.path.join(args.out, "params.txt"), "w") as fh:
        fh.write(new.params.to_text())
    _write_meta(os.path.join(args.out, "meta.txt"), {
        "kind": "stage", "q": new.params.q, "n": params.n, "count": len(new),
        "t0": repr(float(new.times[0])), "dt": repr(new.theta.dt),
        "residual_max": repr(report.residual_max), "residual_tol": repr(report.residual_tol),
    })
    for name in ("R_L", "R_O", "R_R", "R1"):
        print(f"{name:4s} {report.norms[name]:.6e}")
    print(f"residual_max {report.residual_max:.3e} tol {report.residual_tol:.3e} "
          f"{'PASS' if report.residual_ok else 'FAIL'}")
    return EXIT_OK if report.residual_ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _rng():
    return np.random.default_rng(20240601)


def _random_field(grid, kmax: int, rng, mean_zero: bool = True):
    from .grid_spectral import ScalarField

    hat = np.zeros(grid.shape_hat, dtype=complex)
    sel = (np.abs(grid.k1) <= kmax) & (grid.k2 <= kmax)
    hat[sel] = (rng.standard_normal(sel.sum()) + 1j * rng.standard_normal(sel.sum()))
    if mean_zero:
        hat[0, 0] = 0.0
    # round trip through physical space enforces Hermitian symmetry
    return ScalarField(grid, ScalarField(grid, hat=hat).values)


def _suite_spectral() -> list[tuple[str, float, float]]:
    from .grid_spectral import Grid, ScalarField, divergence, fractional_laplacian, resample, riesz_velocity

    g = Grid(64)
    rng = _rng()
    f = _random_field(g, 12, rng)
    back = ScalarField(g, hat=ScalarField(g, f.values).hat)
    u = riesz_velocity(f)
    comp = fractional_laplacian(fractional_laplacian(f, 0.5), -0.5)
    rt = resample(resample(f, 128), 64)
    return [
        ("fft_roundtrip", float(np.max(np.abs(back.values - f.values))), 1e-12),
        ("riesz_velocity_divergence_free", divergence(u).sup(), 1e-10),
        ("fractional_laplacian_inverse", (comp - f).sup(), 1e-10),
        ("resample_roundtrip", (rt - f).sup(), 1e-12),
    ]


def _suite_lp(corrupt: bool) -> list[tuple[str, float, float]]:
    from .grid_spectral import Grid
    from .littlewood_paley import DEFAULT_PROFILE, LpProfile, block_multiplier, max_block

    g = Grid(128)
    psi = LpProfile(1.0, 2.5) if corrupt else DEFAULT_PROFILE
    J = max_block(g)
    blocks = {j: block_multiplier(g.kabs, j, psi) for j in range(-1, J + 1)}
    total = sum(blocks.values())
    inside = g.kabs <= 2.0**J
    overlap = 0.0
    for j in blocks:
        for k in blocks:
            if abs(j - k) > 1:
                overlap = max(overlap, float(np.max(np.abs(blocks[j] * blocks[k]))))
    return [
        ("partition_of_unity", float(np.max(np.abs(total[inside] - 1.0))), 1e-10),
        ("almost_orthogonality", overlap, 0.0),
    ]


def _suite_bilinear() -> list[tuple[str, float, float]]:
    from .bilinear_ops import microlocal_tensor, op_S, op_S_riesz, op_T, quadratic_interaction
    from .grid_spectral import Grid
    from .tensor_calculus import perp_div_div

    g = Grid(64)
    rng = _rng()
    f, h = _random_field(g, 10, rng), _random_field(g, 10, rng)
    anti = (op_T(f, h) + op_T(h, f)).sup()
    s1, s2 = op_S(f, h), op_S_riesz(f, h)
    B = microlocal_tensor(f)
    lhs, rhs = perp_div_div(B), quadratic_interaction(f)
    return [
        ("op_T_antisymmetry", anti, 1e-11),
        ("op_S_riesz_form", (s1 - s2).sup() / max(s1.sup(), 1e-300), 1e-8),
        ("microlocal_identity", (lhs - rhs).sup() / max(rhs.sup(), 1e-300), 1e-6),
    ]


def _suite_tensor() -> list[tuple[str, float, float]]:
    from .grid_spectral import Grid, VectorField
    from .tensor_calculus import GEOMETRIC_BASIS, inv_div, tensor_divergence

    rng = _rng()
    worst = 0.0
    for _ in range(1000):
        while True:
            d = rng.uniform(-0.3, 0.3, 3)
            if math.sqrt(d[0] ** 2 + 2 * d[1] ** 2 + d[2] ** 2) < 0.5:
                break
        r11, r12, r22 = 1 + d[0], d[1], 1 + d[2]
        c = GEOMETRIC_BASIS.coefficients(r11, r12, r22)
        m = GEOMETRIC_BASIS.reconstruct(c)
        worst = max(worst, float(np.max(np.abs(m - np.array([[r11, r12], [r12, r22]])))))
    g = Grid(64)
    u = VectorField(_random_field(g, 10, rng), _random_field(g, 10, rng))
    R = inv_div(u)
    err = (tensor_divergence(R) - u).sup()
    return [
        ("geometric_reconstruction", worst, 1e-13),
        ("div_inv_div", err, 1e-10),
        ("inv_div_trace_free", R.trace().sup(), 1e-12),
    ]


def _suite_flow() -> list[tuple[str, float, float]]:
    from .flow_transport import TimeSampledField, solve_backward_flow
    from .grid_spectral import Grid, ScalarField, riesz_velocity

    g = Grid(64)
    x1, x2 = g.mesh
    th = ScalarField(g, 0.3 * np.cos(x1) + 0.2 * np.sin(2 * x2) + 0.1 * np.cos(x1 + x2))
    u = riesz_velocity(th)
    vel = TimeSampledField(-0.5, 0.25, 5, fields=[u] * 5)
    flow = solve_backward_flow(vel, 0.0, (-0.2, 0.2), dt=0.01)
    det = max(float(np.max(np.abs(s.det() - 1.0))) for s in flow.snapshots)
    return [("flow_determinant", det, 1e-6)]


def _suite_profiles() -> list[tuple[str, float, float]]:
    from .temporal_profiles import build_profiles

    prof = build_profiles(((1, 0), (0, 1), (1, 1), (1, -1)), 5, 0.2)
    t = np.linspace(-1.0, 1.0, 2001)
    ks = range(-7, 8)
    pu = np.abs(sum(prof.chi_k(k, t) ** 2 for k in ks) - 1.0).max()
    cover = 0.0
    for k in ks:
        on = prof.chi_k(k, t) > 0
        cover = max(cover, float(np.max(np.abs(prof.chi_tilde_k(k, t[on]) - 1.0), initial=0.0)))
    s = np.linspace(0.0, 1.0, 4001)
    gs = np.array([prof.g(key, s) for key in prof.keys()])
    overlap = 0.0
    for a in range(len(gs)):
        for b in range(a + 1, len(gs)):
            overlap = max(overlap, float(np.max(np.abs(gs[a] * gs[b]))))
    key = prof.keys()[0]
    per = abs(float(prof.f_prim(key, 1.0 + 0.3)) - float(prof.f_prim(key, 0.3)))
    return [
        ("cutoff_partition_of_unity", float(pu), 1e-12),
        ("enlarged_cutoff_covers", cover, 1e-14),
        ("oscillator_disjoint_supports", overlap, 0.0),
        ("f_primitive_periodic", per, 1e-12),
    ]


SUITES: dict[str, Callable[[], list]] = {
    "spectral": _suite_spectral,
    "lp": _suite_lp,
    "bilinear": _suite_bilinear,
    "tensor": _suite_tensor,
    "flow": _suite_flow,
    "profiles": _suite_profiles,
}


def run_verify(suite: str) -> list[tuple[str, str, float, float, bool]]:
    """Rows (suite, check, value, tolerance, passed) of the chosen property suites."""
    corrupt = os.environ.get(CORRUPT_ENV, "")
    names = list(SUITES) if suite == "all" else [suite]
    rows = []
    for name in names:
        fn = SUITES[name]
        checks = fn(corrupt == name) if name == "lp" else fn()
        for check, value, tol in checks:
            rows.append((name, check, float(value), float(tol), bool(value <= tol)))
    return rows


def cmd_verify(args) -> int:
    rows = run_verify(args.suite)
    print("suite,check,value,tolerance,status")
    for suite, check, value, tol, ok in rows:
        print(f"{suite},{check},{value:.3e},{tol:.1e},{'PASS' if ok else 'FAIL'}")
    failed = [f"{s}.{c}" for s, c, _, _, ok in rows if not ok]
    if failed:
        print("failed invariants: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sqgnash", description="Newton-Nash stages for the relaxed SQG system")
    ap.add_argument("--threads", type=int, default=None, help="cap FFT worker threads (default: SQG_THREADS or 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("basecase", help="write the analytic base-case triple")
    b.add_argument("--n", type=int, default=128)
    b.add_argument("--lambda0", type=int, default=4)
    b.add_argument("--delta0", type=float, default=1e-6, help="base amplitude parameter")
    b.add_argument("--out", required=True)
    b.add_argument("--stride", type=int, default=16, help="write every stride-th time sample")
    b.set_defaults(func=cmd_basecase)

    s = sub.add_parser("stage", help="run one Newton-Nash stage on a base-case directory")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--override-lambda", nargs=2, type=int, metavar=("LQ", "LQ1"))
    s.add_argument("--override-checks", action="store_true", help="run even if the input fails the inductive checks")
    s.add_argument("--workdir", default=None, help="scratch directory for memory-mapped stage data")
    s.add_argument("--stride", type=int, default=32)
    s.set_defaults(func=cmd_stage)

    v = sub.add_parser("verify", help="run module property suites")
    v.add_argument("--suite", choices=["spectral", "lp", "bilinear", "tensor", "flow", "profiles", "all"], default="all")
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .grid_spectral import set_threads

    threads = args.threads if args.threads is not None else os.environ.get("SQG_THREADS")
    if threads is not None:
        try:
            set_threads(int(threads))
        except ValueError:
            print(f"invalid thread count {threads!r}", file=sys.stderr)
            return EXIT_INVALID
    try:
        return args.func(args)
    except _Invalid as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
