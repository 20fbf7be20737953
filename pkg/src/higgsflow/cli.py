"""Experiment runner: run / sweep / compare / classify / loja / sandbox.

Every command writes deterministic CSV/JSON outputs (timestamps only in the
side metadata file) and exits 0 iff all enabled property checks pass.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io as hio
from .config import ExperimentConfig, load_config
from .critical import (
    HNType,
    Order,
    fit_power_law,
    graded_object_check,
    hn_partial_order,
    is_critical,
    loja_fit,
)
from .errors import BlowUpError
from .fields import HiggsPair
from .flow import FlowConfig, compare_flows, run_gradient_flow
from .geometry import TorusGrid
from .initial import (
    make_random_smooth,
    make_split_perturbation,
    make_winding_split,
)
from .sandbox import (
    HKPoint,
    UnitaryRep,
    coulomb_newton,
    hessian_qh,
    identity_adjoint,
    kernel_decompositions,
    product_formulas,
    rho,
    run_sandbox_flow,
    tangent_from_real,
    verify_moment_construction,
)


def make_initial(cfg: ExperimentConfig):
    """Construct the initial pair prescribed by the config; returns (pair, info)."""
    grid = TorusGrid(cfg.grid.N, cfg.grid.L, cfg.grid.backend)
    ini = cfg.initial_data
    if ini.kind == "random_smooth":
        return make_random_smooth(grid, cfg.rank, cfg.seed, k0=ini.spectral_cutoff,
                                  amplitude=ini.amplitude, fixed_det=cfg.fixed_det)
    if ini.kind == "winding_split":
        pair, info = make_winding_split(grid, degrees=tuple(ini.degrees),
                                        phi_consts=tuple(ini.phi_consts),
                                        fixed_det=cfg.fixed_det)
        info.pop("projection", None)
        return pair, info
    if ini.kind == "split_plus_perturbation":
        if ini.snapshot is None:
            raise ValueError("split_plus_perturbation needs initial_data.snapshot")
        anchor, _, _ = hio.read_snapshot(ini.snapshot)
        block_ranks = _block_ranks_from_degrees(ini.degrees)
        return make_split_perturbation(anchor, cfg.seed,
                                       amplitude=ini.extension_amplitude,
                                       k0=ini.spectral_cutoff,
                                       block_ranks=block_ranks)
    if ini.kind == "from_snapshot":
        if ini.snapshot is None:
            raise ValueError("from_snapshot needs initial_data.snapshot")
        pair, t, _ = hio.read_snapshot(ini.snapshot)
        return pair, {"snapshot_t": t}
    raise ValueError(f"unknown initial kind {ini.kind}")


def _block_ranks_from_degrees(degrees) -> tuple:
    # cumulative ranks of equal-degree blocks; degrees are per-block here
    return tuple(range(1, len(degrees)))


def _out_paths(cfg: ExperimentConfig, out_override=None):
    out = Path(out_override or cfg.outputs.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / cfg.outputs.snapshot_dir).mkdir(exist_ok=True)
    return out


def _write_meta(out: Path, cfg: ExperimentConfig):
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "code_version": __version__,
            "config_hash": hio.config_hash(cfg.to_dict())}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def cmd_run(cfg: ExperimentConfig, out_dir=None, check=False) -> int:
    out = _out_paths(cfg, out_dir)
    pair, info = make_initial(cfg)
    traj = run_gradient_flow(pair, cfg.flow)
    hio.write_trajectory_csv(out / cfg.outputs.csv_name, traj, cfg.rank)
    for i, (t, snap) in enumerate(traj.snapshots):
        hio.write_snapshot(out / cfg.outputs.snapshot_dir / f"snap_{i:04d}.hsn",
                           snap, t=t)
    rep = is_critical(traj.final_pair, tol=10 * cfg.flow.tol_grad)
    fit = loja_fit(traj, grad_tol=cfg.flow.tol_grad)
    checks = {
        "ymh_monotone": traj.ymh_violations() == 0,
        "sup_mu_monotone": traj.sup_violations() == 0,
        "residual_bounded": bool(traj.higgs_residual.max()
                                 <= traj.higgs_residual[0] + 1e-8),
        "converged": traj.status == "converged",
    }
    payload = {
        "status": traj.status,
        "t_final": traj.t_final,
        "n_steps": traj.n_steps,
        "initial_info": {k: v for k, v in info.items() if not isinstance(v, np.ndarray)},
        "final": rep.to_dict(),
        "loja": {"theta": fit.theta, "fit_r2": fit.fit_r2, "status": fit.status},
        "checks": checks,
    }
    hio.write_report(out / cfg.outputs.report_name, payload,
                     config_dict=cfg.to_dict(), seed=cfg.seed)
    _write_meta(out, cfg)
    if check and not all(checks.values()):
        _fail({"failed_checks": [k for k, v in checks.items() if not v]})
        return 1
    return 0


def cmd_sweep(cfg: ExperimentConfig, n_seeds: int, out_dir=None, check=False) -> int:
    out = _out_paths(cfg, out_dir)
    rows = []
    type_counts = {}
    order_violations = []
    init_type_str = None
    seeds = [int(s) for s in
             np.random.SeedSequence(cfg.seed).generate_state(n_seeds)]
    for i, seed in enumerate(seeds):
        run_cfg = ExperimentConfig(**{**cfg.__dict__})
        run_cfg.seed = seed
        t0 = time.perf_counter()
        pair, _ = make_initial(run_cfg)
        init_mu = _initial_stratum(run_cfg)
        traj = run_gradient_flow(pair, cfg.flow)
        rep = is_critical(traj.final_pair, tol=10 * cfg.flow.tol_grad)
        fit = loja_fit(traj, grad_tol=cfg.flow.tol_grad)
        limit_str = str(rep.hn_type) if rep.hn_type else "unsettled"
        order_ok = None
        if rep.hn_type is not None and init_mu is not None:
            order = hn_partial_order(init_mu, rep.hn_type)
            order_ok = order in (Order.LE, Order.EQ)
            if not order_ok:
                order_violations.append({"seed": seed, "limit": limit_str})
        type_counts[limit_str] = type_counts.get(limit_str, 0) + 1
        rows.append({
            "seed": seed, "converged": traj.status == "converged",
            "t_final": traj.t_final,
            "init_type": str(init_mu) if init_mu else "generic(0)",
            "limit_type": limit_str,
            "order_ok": order_ok,
            "degrees": rep.degrees,
            "theta": fit.theta, "fit_r2": fit.fit_r2,
            "runtime_s": time.perf_counter() - t0,
        })
    # stratification table
    cols = ["seed", "converged", "t_final", "init_type", "limit_type",
            "order_ok", "theta", "fit_r2", "runtime_s"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    payload = {"type_counts": type_counts, "order_violations": order_violations,
               "n_converged": sum(r["converged"] for r in rows), "rows": rows}
    hio.write_report(out / "sweep_report.json", payload,
                     config_dict=cfg.to_dict(), seed=cfg.seed)
    _write_meta(out, cfg)
    if check and order_violations:
        _fail({"order_violations": order_violations})
        return 1
    return 0


def _initial_stratum(cfg: ExperimentConfig):
    ini = cfg.initial_data
    if ini.kind in ("winding_split", "split_plus_perturbation"):
        mu = []
        degs = list(ini.degrees)
        for d in degs:
            mu.append(d)
        try:
            return HNType(tuple(sorted(mu, reverse=True)))
        except ValueError:
            return None
    if ini.kind == "random_smooth":
        # generic smooth data is semistable; recorded as the zero type
        return HNType((0,) * cfg.rank)
    return None


def cmd_compare(cfg: ExperimentConfig, out_dir=None, check=False,
                T: float = 1.0) -> int:
    out = _out_paths(cfg, out_dir)
    pair, _ = make_initial(cfg)
    rng = np.random.default_rng(cfg.seed)
    q, _ = np.linalg.qr(rng.standard_normal((cfg.rank, cfg.rank))
                        + 1j * rng.standard_normal((cfg.rank, cfg.rank)))
    rep = compare_flows(pair, cfg.flow, T=T, sqrt_choice_unitary=q)
    payload = rep.to_dict()
    hio.write_report(out / "equivalence_report.json", payload,
                     config_dict=cfg.to_dict(), seed=cfg.seed)
    _write_meta(out, cfg)
    ok = rep.max_discrepancy <= 1e-3 and (rep.sqrt_choice_diff or 0.0) <= 1e-8
    if check and not ok:
        _fail({"max_discrepancy": rep.max_discrepancy,
               "sqrt_choice_diff": rep.sqrt_choice_diff})
        return 1
    return 0


def cmd_classify(snapshot_path, out_path=None, check=False) -> int:
    obj, t, header = hio.read_snapshot(snapshot_path)
    if not isinstance(obj, HiggsPair):
        obj = obj.base
    rep = is_critical(obj)
    doc = rep.to_dict()
    doc["snapshot_t"] = t
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        print(text)
    if check and not (rep.critical and rep.settled):
        return 1
    return 0


def cmd_loja(csv_path, out_path=None, check=False) -> int:
    rows = Path(csv_path).read_text().strip().split("\n")
    header = rows[0].split(",")
    it, iy, ig = header.index("time"), header.index("ymh"), header.index("grad_norm")
    data = np.array([[float(x) for x in row.split(",")] for row in rows[1:]])
    theta, r2, c, window, status = fit_power_law(data[:, it], data[:, iy], data[:, ig])
    doc = {"theta": theta, "fit_r2": r2, "c": c, "window": window, "status": status}
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        print(text)
    if check and status != "ok":
        return 1
    return 0


def cmd_sandbox(out_path=None, check=False, seed: int = 0, n_random: int = 100) -> int:
    """Machine-precision identity suite on the hyperkaehler sandbox."""
    rng = np.random.default_rng(seed)
    rep = UnitaryRep.u2_two_fundamentals()
    n = rep.n
    worst = {"eq_adjoint": 0.0, "eq_product_i": 0.0, "eq_product_comm": 0.0,
             "eq_product_plain": 0.0}
    for _ in range(n_random):
        x = HKPoint(rng.standard_normal(n) + 1j * rng.standard_normal(n),
                    rng.standard_normal(n) + 1j * rng.standard_normal(n))
        u = rng.standard_normal(rep.dim)
        Xr = rng.standard_normal(4 * n)
        X = tangent_from_real(Xr, n)
        res = identity_adjoint(rep, x, u)
        worst["eq_adjoint"] = max(worst["eq_adjoint"], max(res.values()))
        pf = product_formulas(rep, x, u, X)
        worst["eq_product_i"] = max(worst["eq_product_i"], pf["i_twisted"])
        worst["eq_product_comm"] = max(worst["eq_product_comm"], pf["commutativity"])
        worst["eq_product_plain"] = max(worst["eq_product_plain"], pf["plain"])
    x = HKPoint(rng.standard_normal(n) + 1j * rng.standard_normal(n),
                rng.standard_normal(n) + 1j * rng.standard_normal(n))
    moment_fd = verify_moment_construction(rep, x, rng=rng, n_checks=25)
    H = hessian_qh(rep, x)
    sym = float(np.abs(H - H.T).max())
    doc = {
        "identities_max_residual": worst,
        "moment_defining_fd": moment_fd,
        "hessian_asymmetry": sym,
        "pass": bool(max(worst.values()) <= 1e-10 and moment_fd <= 1e-8
                     and sym <= 1e-10),
    }
    text = json.dumps(doc, indent=2)
    if out_path:
        Path(out_path).write_text(text + "\n")
    else:
        print(text)
    if check and not doc["pass"]:
        return 1
    return 0


def _fail(diag: dict):
    sys.stderr.write(json.dumps({"error": "check_failed", **diag},
                                default=str) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="higgsflow",
                                 description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--check", action="store_true",
                       help="run property checks; nonzero exit on failure")

    p_run = sub.add_parser("run", help="single gradient-flow run")
    add_common(p_run)
    p_sweep = sub.add_parser("sweep", help="multi-seed stratification sweep")
    add_common(p_sweep)
    p_sweep.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p_cmp = sub.add_parser("compare", help="flow-equivalence harness")
    add_common(p_cmp)
    p_cmp.add_argument("--T", type=float, default=1.0)
    p_cls = sub.add_parser("classify", help="classify a snapshot")
    p_cls.add_argument("snapshot")
    p_cls.add_argument("--out", default=None)
    p_cls.add_argument("--check", action="store_true")
    p_loja = sub.add_parser("loja", help="Lojasiewicz fit on a trajectory CSV")
    p_loja.add_argument("csv")
    p_loja.add_argument("--out", default=None)
    p_loja.add_argument("--check", action="store_true")
    p_sb = sub.add_parser("sandbox", help="hyperkaehler identity suite")
    p_sb.add_argument("--out", default=None)
    p_sb.add_argument("--seed", type=int, default=0)
    p_sb.add_argument("--check", action="store_true")

    args = ap.parse_args(argv)
    try:
        if args.command in ("run", "sweep", "compare"):
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            if args.command == "run":
                return cmd_run(cfg, out_dir=args.out, check=args.check)
            if args.command == "sweep":
                return cmd_sweep(cfg, args.seeds, out_dir=args.out, check=args.check)
            return cmd_compare(cfg, out_dir=args.out, check=args.check, T=args.T)
        if args.command == "classify":
            return cmd_classify(args.snapshot, out_path=args.out, check=args.check)
        if args.command == "loja":
            return cmd_loja(args.csv, out_path=args.out, check=args.check)
        if args.command == "sandbox":
            return cmd_sandbox(out_path=args.out, check=args.check, seed=args.seed)
        ap.error(f"unknown command {args.command}")
    except (ValueError, RuntimeError, BlowUpError, OSError) as exc:
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
