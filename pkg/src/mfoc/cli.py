"""Command-line front end: simulate, gradcheck, pmp-check, needle-check.

Exit codes: 0 pass, 1 a check failed, 2 scenario/parse error, 3 numerical
blow-up.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dynamics import DynamicsError, solve_forward, verify_first_order
from .functionals import chainrule_fd_oracle
from .scenario import Scenario, ScenarioError, load_scenario

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_PARSE = 2
EXIT_BLOWUP = 3


def _load(args) -> Scenario:
    steps_override = None
    if args.dt_override is not None:
        raw = json.loads(Path(args.scenario).read_text())
        steps_override = max(1, round(float(raw["horizon"]) / args.dt_override))
    return load_scenario(args.scenario, steps_override=steps_override, seed_override=args.seed)


def cmd_simulate(args) -> int:
    try:
        sc = _load(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        traj = solve_forward(sc.initial_measure, sc.kernel, sc.law, sc.grid)
    except DynamicsError as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.csv").write_text(traj.to_csv())

    from .fields import check_hypotheses

    advisory = check_hypotheses(
        sc.kernel, sc.law, radius=max(traj.radius_bound, 1.0), samples=100,
        seed=sc.seed, horizon=sc.grid.horizon,
    )
    summary = {
        "seed": sc.seed,
        "support_radius_bound": traj.radius_bound,
        "hypotheses_ok": advisory.ok,
        "hypotheses_violations": advisory.violations,
    }
    mu_T = traj.cloud(sc.grid.steps)
    if sc.terminal_cost is not None:
        summary["terminal_cost"] = sc.terminal_cost.value(mu_T)
    if sc.running_cost is not None:
        nodes = sc.grid.nodes()
        samples = [
            sc.running_cost.value(t, traj.cloud(k), sc.law.at_time(t))
            for k, t in enumerate(nodes)
        ]
        summary["running_cost"] = float(np.trapezoid(samples, nodes))
    if "terminal_cost" in summary or "running_cost" in summary:
        summary["total_cost"] = summary.get("terminal_cost", 0.0) + summary.get(
            "running_cost", 0.0
        )
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {out / 'trajectory.csv'} ({sc.grid.steps + 1} nodes, "
          f"{traj.num_atoms} atoms)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        sc = _load(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    rng = np.random.default_rng(sc.seed)
    h = 1e-4
    rows = []
    failures = []

    def random_cloud():
        from .measures import DiscreteMeasure

        pts = rng.uniform(-1.0, 1.0, (10, sc.dim))
        w = rng.uniform(0.2, 1.0, 10)
        return DiscreteMeasure(pts, w / w.sum())

    def check(name, value_fn, grad_fn, tol_scale=1e-5):
        worst = 0.0
        for _ in range(args.clouds):
            mu = random_cloud()
            v = rng.uniform(-1.0, 1.0, mu.points.shape)
            value = value_fn(mu)
            grads = grad_fn(mu)
            predicted = float(np.sum(mu.weights[:, None] * grads * v))
            observed = chainrule_fd_oracle(value_fn, mu, v, h)
            refined = chainrule_fd_oracle(value_fn, mu, v, h / 2)
            err = abs(observed - predicted) / (1.0 + abs(value))
            err = min(err, abs(refined - predicted) / (1.0 + abs(value)))
            worst = max(worst, err)
        ok = worst <= tol_scale
        rows.append((name, worst, tol_scale, ok))
        if not ok:
            failures.append(name)

    field0 = sc.law.at_time(0.0)
    if sc.terminal_cost is not None:
        tc = sc.terminal_cost
        check(getattr(tc, "name", "terminal"), tc.value, tc.gradient)
    for psi in sc.endpoint_inequalities + sc.endpoint_equalities:
        check(getattr(psi, "name", "endpoint"), psi.value, psi.gradient)
    if sc.running_cost is not None:
        rc = sc.running_cost
        check(
            rc.name,
            lambda mu: rc.value(0.0, mu, field0),
            lambda mu: rc.gradient(0.0, mu, field0),
        )
    from .pmp import grad_penalized_constraint, penalized_constraint

    for lam in sc.state_constraints:
        check(
            lam.name,
            lambda mu, lam=lam: lam.value(0.0, mu),
            lambda mu, lam=lam: lam.gradient(0.0, mu),
        )
        check(
            f"{lam.name}+penalization",
            lambda mu, lam=lam: penalized_constraint(
                0.0, mu, [1.0], sc.kernel, field0, [lam]
            ),
            lambda mu, lam=lam: grad_penalized_constraint(
                0.0, mu, [1.0], sc.kernel, field0, [lam]
            ),
            tol_scale=1e-4,
        )

    print(f"{'functional':<32} {'max rel err':>12} {'tolerance':>10}  status")
    for name, worst, tol, ok in rows:
        print(f"{name:<32} {worst:12.3e} {tol:10.0e}  {'ok' if ok else 'FAIL'}")
    if failures:
        print(f"gradient check failed for: {', '.join(failures)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_pmp_check(args) -> int:
    try:
        sc = _load(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if sc.multipliers is None or not sc.dictionary:
        print("scenario lacks multipliers or a control dictionary", file=sys.stderr)
        return EXIT_PARSE
    from .pmp import check_certificate, solve_costate_backward

    try:
        traj = solve_forward(sc.initial_measure, sc.kernel, sc.law, sc.grid)
        costates = solve_costate_backward(
            traj, sc.kernel, sc.law, sc.multipliers, sc.terminal_cost,
            sc.endpoint_inequalities, sc.endpoint_equalities,
            sc.running_cost, sc.state_constraints,
        )
    except DynamicsError as exc:
        print(f"integration aborted: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    checks = sc.checks
    report = check_certificate(
        traj, costates, sc.multipliers, sc.dictionary, sc.kernel, sc.law,
        sc.running_cost, sc.terminal_cost, sc.endpoint_inequalities,
        sc.endpoint_equalities, sc.state_constraints,
        gap_tol_scale=checks.get("gap_tol_scale", 1e-6),
        tol_active=checks.get("tol_active", 1e-6),
        k_taus=checks.get("k_taus"),
        k_sign_tol=checks.get("k_sign_tol", 1e-8),
        k_constancy_tol=checks.get("k_constancy_tol"),
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "certificate.json").write_text(report.to_json())
    worst_gap = float(np.max(report.maximization_gaps))
    print(f"maximization: worst gap {worst_gap:.3e} "
          f"({'ok' if report.maximization_ok else 'FAIL'})")
    print(f"slackness: {'ok' if report.slackness_ok else 'FAIL'}")
    print(f"non-degeneracy: {'ok' if report.nondegenerate else 'FAIL'}")
    if report.k_reports:
        dev = max(r["k_deviation"] for r in report.k_reports)
        kfin = max(r["k_final"] for r in report.k_reports)
        print(f"k-functions: max deviation {dev:.3e}, max final value {kfin:.3e} "
              f"({'ok' if report.k_sign_ok and report.k_constancy_ok else 'FAIL'})")
    if report.passed:
        print("certificate PASSED")
        return EXIT_OK
    print(f"certificate FAILED: {', '.join(report.violation_categories())}")
    return EXIT_FAIL


def cmd_needle_check(args) -> int:
    try:
        sc = _load(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if sc.needle_package is None:
        print("scenario declares no needle package", file=sys.stderr)
        return EXIT_PARSE
    try:
        rows = verify_first_order(
            sc.initial_measure, sc.kernel, sc.law, sc.needle_package,
            halvings=sc.needle_halvings,
        )
    except DynamicsError as exc:
        print(f"integration aborted: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    print(f"{'|e|':>12} {'residual':>12} {'residual/|e|':>14}")
    for row in rows:
        print(f"{row['e_norm']:12.4e} {row['residual']:12.4e} {row['residual_per_e']:14.4e}")
    ratios = [row["residual_per_e"] for row in rows]
    tiny = all(row["residual"] <= 1e-9 for row in rows)
    decreasing = all(b < a for a, b in zip(ratios, ratios[1:]))
    if tiny or decreasing:
        print("first-order expansion verified")
        return EXIT_OK
    print("residual decay is not monotone", file=sys.stderr)
    return EXIT_FAIL


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfoc",
        description="Particle toolkit for constrained mean-field optimal control",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("simulate", cmd_simulate),
        ("gradcheck", cmd_gradcheck),
        ("pmp-check", cmd_pmp_check),
        ("needle-check", cmd_needle_check),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="path to a scenario JSON file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--dt-override", type=float, default=None,
                       help="rebuild the grid at this time step")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        if name == "gradcheck":
            p.add_argument("--clouds", type=int, default=20,
                           help="random clouds per functional")
        p.set_defaults(func=fn)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
