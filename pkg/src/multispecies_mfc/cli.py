"""Command-line front end: ``mfc generate | solve | render``.

Exit codes: 0 success, 1 invalid arguments or scenario, 2 infeasible
problem, 3 no convergence (outputs are still written), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .kernel import build_kernels
from .render import density_image, strip, write_ppm
from .scenario import (
    ScenarioError,
    generate_paper_example,
    load_scenario,
    problem_hash,
    read_density_csv,
    render_scenario,
    validate_problem,
    write_density_csv,
)
from .solver import NumericalError, SolveOptions, solve
from .updates import InfeasibleError

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NOT_CONVERGED, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("multispecies_mfc")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which is reserved for infeasibility
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _checkpoint_every(text: str) -> int:
    key, _, value = text.partition("=")
    if key != "every" or not value.isdigit() or int(value) < 1:
        raise argparse.ArgumentTypeError("expected every=N with N >= 1")
    return int(value)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate", help="write a scenario document")
    gen.add_argument("--paper-example", action="store_true", required=True,
                     help="three robot types on water/rough/normal terrain")
    gen.add_argument("--grid", type=int, default=100, help="cells per side (>= 10)")
    gen.add_argument("--horizon", type=int, default=60, help="time steps (>= 2)")
    gen.add_argument("-o", "--output", required=True)

    sol = sub.add_parser("solve", help="solve a scenario and write densities")
    sol.add_argument("--scenario", required=True)
    sol.add_argument("--out", required=True)
    sol.add_argument("--tol", type=float, default=1e-6)
    sol.add_argument("--max-sweeps", type=int, default=5000)
    sol.add_argument("--epsilon", type=float, default=None, help="override the scenario's epsilon")
    sol.add_argument("--threads", type=int, default=None, help="defaults to $MFC_THREADS or 1")
    sol.add_argument("--deterministic", action="store_true")
    sol.add_argument("--log-domain", action="store_true")
    sol.add_argument("--record-every", type=int, default=1)
    sol.add_argument("--checkpoint", type=_checkpoint_every, default=None, metavar="every=N")
    sol.add_argument("--resume", default=None, help="checkpoint file to continue from")

    ren = sub.add_parser("render", help="draw PPM heatmaps from solve outputs")
    ren.add_argument("--run", required=True, help="output directory of a solve")
    ren.add_argument("--out", default=None, help="image directory (default RUN/images)")
    ren.add_argument("--max", type=float, default=1.0, help="density drawn at full intensity")
    ren.add_argument("--scale", type=int, default=4, help="pixels per cell")
    ren.add_argument("--frames", type=int, default=6, help="time steps in the strip")
    return parser


def cmd_generate(args) -> int:
    try:
        problem = generate_paper_example(args.grid, args.horizon)
    except ValueError as exc:
        print(f"mfc generate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        Path(args.output).write_text(render_scenario(problem))
    except OSError as exc:
        print(f"mfc generate: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _finite(x):
    # strict JSON has no infinity; the first sweep's log-change can be infinite
    return x if np.isfinite(x) else None


def _write_outputs(out: Path, problem, solution, inventory: list, masses: dict):
    g = problem.grid
    for j in range(problem.horizon + 1):
        name = f"total_t{j}.csv"
        write_density_csv(out / name, solution.totals[j], g.width, g.height, j, "total")
        inventory.append(name)
        masses[name] = float(np.sum(solution.totals[j]))
        for ell in range(problem.n_species):
            name = f"species{ell + 1}_t{j}.csv"
            write_density_csv(out / name, solution.species_marginals[j][ell], g.width, g.height, j, ell + 1)
            inventory.append(name)
            masses[name] = float(np.sum(solution.species_marginals[j][ell]))
    with open(out / "convergence.jsonl", "w") as fh:
        for rec in solution.residual_history:
            row = {"sweep": rec.sweep, "residual": _finite(rec.residual), "log_change": _finite(rec.log_change)}
            fh.write(json.dumps(row, allow_nan=False) + "\n")
    inventory.append("convergence.jsonl")


def cmd_solve(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    try:
        problem = load_scenario(args.scenario)
    except OSError as exc:
        print(f"mfc solve: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"mfc solve: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.epsilon is not None:
        try:
            problem = validate_problem(dataclasses.replace(problem, epsilon=float(args.epsilon)))
        except ScenarioError as exc:
            print(f"mfc solve: {exc}", file=sys.stderr)
            return EXIT_USAGE
    threads = args.threads if args.threads is not None else int(os.environ.get("MFC_THREADS", "1"))
    try:
        options = SolveOptions(
            tol=args.tol,
            max_sweeps=args.max_sweeps,
            log_domain=args.log_domain,
            record_every=args.record_every,
            threads=threads,
            deterministic=args.deterministic,
        )
    except ValueError as exc:
        print(f"mfc solve: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    digest = problem_hash(problem)
    inventory, masses = [], {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scenario.json").write_text(render_scenario(problem))
        inventory.append("scenario.json")
        resume = {}
        if args.resume:
            ckpt = load_checkpoint(args.resume, digest)
            resume = dict(state=ckpt.state, history=ckpt.history, start_sweep=ckpt.sweep)

        def on_sweep(k, state, history):
            if args.checkpoint and k % args.checkpoint == 0:
                save_checkpoint(out / "checkpoint.npz", digest, k, state, history)
                if "checkpoint.npz" not in inventory:  # listed once, rewritten in place
                    inventory.append("checkpoint.npz")

        kernels = build_kernels(problem)
        try:
            solution = solve(problem, options, kernels=kernels, on_sweep=on_sweep, **resume)
        except InfeasibleError as exc:
            hint = "" if options.log_domain else " (if kernels underflow, retry with --log-domain)"
            print(f"mfc solve: infeasible at sweep {getattr(exc, 'sweep', '?')}: {exc}{hint}", file=sys.stderr)
            return EXIT_INFEASIBLE
        except NumericalError as exc:
            print(f"mfc solve: {exc}", file=sys.stderr)
            return EXIT_NOT_CONVERGED
        _write_outputs(out, problem, solution, inventory, masses)
        last = solution.residual_history[-1] if solution.residual_history else None
        inventory.append("manifest.json")
        manifest = {
            "scenario_hash": digest,
            "options": dataclasses.asdict(options),
            "started_at": started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "sweeps_used": solution.sweeps_used,
            "converged": solution.converged,
            "final_residual": _finite(last.residual) if last else None,
            "final_log_change": _finite(last.log_change) if last else None,
            "masses": masses,
            "inventory": inventory,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, allow_nan=False) + "\n")
    except (OSError, CheckpointError) as exc:
        print(f"mfc solve: {exc}", file=sys.stderr)
        return EXIT_IO
    if not solution.converged:
        print(f"mfc solve: not converged after {solution.sweeps_used} sweeps", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_render(args) -> int:
    run = Path(args.run)
    try:
        problem = load_scenario(run / "scenario.json")
        out = Path(args.out) if args.out else run / "images"
        out.mkdir(parents=True, exist_ok=True)
        g = problem.grid
        labels = ["total"] + [f"species{ell + 1}" for ell in range(problem.n_species)]
        frames = np.unique(np.linspace(0, problem.horizon, max(1, args.frames)).round().astype(int))
        rows = {label: [] for label in labels}
        for j in range(problem.horizon + 1):
            for label in labels:
                density = read_density_csv(run / f"{label}_t{j}.csv")
                img = density_image(g, density, args.max, args.scale)
                write_ppm(out / f"{label}_t{j}.ppm", img)
                if j in frames:
                    rows[label].append(img)
        write_ppm(out / "strip.ppm", strip([rows[label] for label in labels]))
    except (OSError, ScenarioError, ValueError) as exc:
        print(f"mfc render: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    handler = {"generate": cmd_generate, "solve": cmd_solve, "render": cmd_render}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
