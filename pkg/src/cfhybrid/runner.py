"""Experiment drivers and the command-line interface.

Composes the pipeline (geometry -> spatial model -> pilots -> precoding
statistics -> mode allocation -> power optimization -> rate evaluation)
into reproducible experiments, and writes every artifact as CSV.

Seeding is hierarchical: a master seed plus a small integer path identifies
every stream, so any cell of a sweep can be reproduced in isolation and
execution order never changes results.  Mode draws share their uniforms
across the probability grid (common random numbers): raising p only ever
flips UEs toward the coherent mode, which removes draw noise from the
shape of sum-rate-versus-p curves.
"""

import argparse
import csv
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .chanstat import PrecodingStatistics, estimate_statistics
from .errors import ConfigError, NumericalError
from .netgen import (
    PilotAssignment,
    SpatialModel,
    SystemConfig,
    Topology,
    assign_pilots,
    build_spatial_model,
    build_topology,
    load_config,
)
from .rates import ModeAssignment, RateReport
from .sca import ScaRun, ScaState, run_sca
from .seeding import subseed, substream

# stream paths under the master seed
_PATH_TOPOLOGY = 0
_PATH_PILOTS = 1
_PATH_STATS = 2
_PATH_MODES = 3
_PATH_SCENARIO = 4

DEFAULT_CONVERGE_MODES = "010101010101010"
DEFAULT_P_GRID = tuple(round(0.1 * i, 1) for i in range(11))


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """One network realization with its precoding statistics."""

    config: SystemConfig
    seed: int
    topology: Topology
    spatial: SpatialModel
    pilots: PilotAssignment
    stats: PrecodingStatistics


def build_scenario(config: SystemConfig, seed: int) -> Scenario:
    """Generate geometry, pilots, and statistics for one realization."""
    topology = build_topology(config, subseed(seed, _PATH_TOPOLOGY))
    spatial = build_spatial_model(topology, config)
    pilots = assign_pilots(config.K, config.tau_p, subseed(seed, _PATH_PILOTS))
    stats = estimate_statistics(spatial, pilots, topology, config,
                                seed=subseed(seed, _PATH_STATS))
    return Scenario(config=config, seed=seed, topology=topology,
                    spatial=spatial, pilots=pilots, stats=stats)


def allocate_modes(K: int, p: float, seed: int) -> ModeAssignment:
    """Draw each UE's serving mode: coherent with probability p.

    The K uniforms depend only on the seed, so sweeping p with a fixed seed
    moves UEs monotonically into the coherent group.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mode probability must be in [0, 1], got {p}")
    u = substream(seed, _PATH_MODES).uniform(size=K)
    return ModeAssignment(is_cjt=u < p)


@dataclass
class RunResult:
    """One optimized realization: rate report plus the full ascent record."""

    report: RateReport
    trace: ScaState
    run: ScaRun
    scenario: Scenario


def run_single(config: SystemConfig, modes: ModeAssignment, seed: int,
               t_max: int = 30) -> RunResult:
    """Full pipeline on one scenario; deterministic per (config, seed)."""
    scenario = build_scenario(config, seed)
    run = run_sca(scenario.stats, modes, scenario.topology, config, t_max=t_max)
    return RunResult(report=run.report, trace=run.state, run=run,
                     scenario=scenario)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    """Grid description for sum-rate-versus-p experiments."""

    base: SystemConfig
    p_grid: tuple = DEFAULT_P_GRID
    topology_draws: int = 10
    mode_draws_per_p: int = 5
    cmax_grid: tuple | None = None       # varied fronthaul budgets, bit/s/Hz
    serving_grid: tuple | None = None    # varied serving-set sizes
    seed: int = 1
    t_max: int = 30

    def validate(self) -> "SweepSpec":
        if not self.p_grid:
            raise ConfigError("empty p grid")
        for p in self.p_grid:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"grid probability out of [0, 1]: {p}")
        if self.topology_draws < 1 or self.mode_draws_per_p < 1:
            raise ConfigError("draw counts must be at least 1")
        if self.cmax_grid is not None and self.serving_grid is not None:
            raise ConfigError("vary at most one parameter per sweep")
        return self


@dataclass
class SweepRow:
    """One optimized cell of the sweep grid."""

    p: float
    cmax_bpsHz: float
    serving_set_size: int
    topo_trial: int
    mode_trial: int
    n_cjt: int
    sum_rate_bpsHz: float
    recomputed_sum_rate_bpsHz: float
    iterations: int
    converged: bool
    failed: bool = False


@dataclass
class SweepResult:
    """All sweep rows plus per-(p, parameter) aggregates."""

    spec: SweepSpec
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    n_failed: int = 0


def _aggregate(rows) -> list:
    """Mean and standard error of sum rate per (p, cmax, serving size)."""
    groups = {}
    for r in rows:
        if not r.failed:
            groups.setdefault((r.p, r.cmax_bpsHz, r.serving_set_size),
                              []).append(r.sum_rate_bpsHz)
    out = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        stderr = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append(dict(p=key[0], cmax_bpsHz=key[1], serving_set_size=key[2],
                        mean_sum_rate=float(vals.mean()), stderr=stderr,
                        n_samples=int(vals.size)))
    return out


def sweep_p(spec: SweepSpec) -> SweepResult:
    """Traverse the probability grid over topology and mode draws.

    Statistics are computed once per (serving size, topology draw) and
    reused across the whole p grid, every mode draw, and every fronthaul
    budget.  A failed optimization marks its row converged=false with NaN
    rates and is excluded from the aggregates.
    """
    spec.validate()
    sizes = spec.serving_grid or (spec.base.serving_set_size,)
    cmaxes = spec.cmax_grid or (spec.base.fronthaul_cap_bpsHz,)
    result = SweepResult(spec=spec)

    for size in sizes:
        cfg_size = replace(spec.base, serving_set_size=int(size))
        for t in range(spec.topology_draws):
            scenario = build_scenario(cfg_size, subseed(spec.seed, _PATH_SCENARIO, t))
            for d in range(spec.mode_draws_per_p):
                mode_seed = subseed(spec.seed, _PATH_MODES, t, d)
                for p in spec.p_grid:
                    modes = allocate_modes(cfg_size.K, p, mode_seed)
                    for cmax in cmaxes:
                        cfg = replace(cfg_size, fronthaul_cap_bpsHz=float(cmax))
                        row = SweepRow(
                            p=float(p), cmax_bpsHz=float(cmax),
                            serving_set_size=int(size), topo_trial=t,
                            mode_trial=d, n_cjt=modes.n_cjt,
                            sum_rate_bpsHz=float("nan"),
                            recomputed_sum_rate_bpsHz=float("nan"),
                            iterations=0, converged=False, failed=True)
                        try:
                            run = run_sca(scenario.stats, modes,
                                          scenario.topology, cfg,
                                          t_max=spec.t_max)
                        except NumericalError:
                            result.n_failed += 1
                        else:
                            row.sum_rate_bpsHz = run.objective
                            row.recomputed_sum_rate_bpsHz = run.report.sum_rate_bpsHz
                            row.iterations = run.iterations
                            row.converged = run.converged
                            row.failed = False
                        result.rows.append(row)

    result.rows.sort(key=lambda r: (r.p, r.cmax_bpsHz, r.serving_set_size,
                                    r.topo_trial, r.mode_trial))
    result.summary = _aggregate(result.rows)
    return result


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _num(x) -> str:
    """Full-precision, round-trippable decimal text."""
    return repr(float(x))


def write_scenario_csvs(scenario: Scenario, out_dir) -> list:
    topo, pilots = scenario.topology, scenario.pilots
    out = Path(out_dir)
    paths = [
        _write_csv(out / "ap_positions.csv", ["ap_id", "x_m", "y_m"],
                   [[m, _num(x), _num(y)] for m, (x, y) in enumerate(topo.ap_pos)]),
        _write_csv(out / "ue_positions.csv", ["ue_id", "x_m", "y_m"],
                   [[k, _num(x), _num(y)] for k, (x, y) in enumerate(topo.ue_pos)]),
        _write_csv(out / "links.csv",
                   ["ap_id", "ue_id", "distance_m", "beta_db", "serving", "pilot_index"],
                   [[m, k, _num(topo.distance_m[m, k]),
                     _num(10.0 * np.log10(topo.beta[m, k])),
                     int(topo.serving_mask[m, k]), int(pilots.pilot_index[k])]
                    for m in range(topo.M) for k in range(topo.K)]),
    ]
    return paths


def write_run_csvs(result: RunResult, out_dir) -> list:
    """Convergence trace, final powers, per-UE rates, per-AP fronthaul."""
    run, report, cfg = result.run, result.report, result.scenario.config
    topo = result.scenario.topology
    st = run.state
    out = Path(out_dir)
    conv_rows = [[i + 1, _num(obj), _num(fh), _num(pw)]
                 for i, (obj, fh, pw) in enumerate(zip(
                     st.objective_history, st.fronthaul_violation_history,
                     st.power_violation_history))]
    power_rows = [[m, k, _num(run.power.p[m, k])]
                  for k in range(topo.K) for m in topo.serving_sets[k]]
    power_rows.sort(key=lambda r: (r[0], r[1]))
    rate_rows = [[k, report.modes.mode_of(k), _num(report.rate_bpsHz[k])]
                 for k in range(topo.K)]
    fh_rows = [[m, _num(report.fronthaul_bpsHz[m]), _num(cfg.fronthaul_cap_bpsHz),
                _num(cfg.fronthaul_cap_bpsHz - report.fronthaul_bpsHz[m])]
               for m in range(topo.M)]
    return [
        _write_csv(out / "convergence.csv",
                   ["iteration", "objective_bpsHz", "max_fronthaul_violation",
                    "max_power_violation"], conv_rows),
        _write_csv(out / "power.csv", ["ap_id", "ue_id", "power_W"], power_rows),
        _write_csv(out / "rates.csv", ["ue_id", "mode", "rate_bpsHz"], rate_rows),
        _write_csv(out / "fronthaul.csv",
                   ["ap_id", "load_bpsHz", "cap_bpsHz", "slack"], fh_rows),
    ]


def write_sweep_csvs(result: SweepResult, out_dir) -> list:
    out = Path(out_dir)
    sweep_rows = [[_num(r.p), _num(r.cmax_bpsHz), r.serving_set_size,
                   r.topo_trial, r.mode_trial, r.n_cjt, _num(r.sum_rate_bpsHz),
                   _num(r.recomputed_sum_rate_bpsHz), r.iterations,
                   int(r.converged)]
                  for r in result.rows]
    summary_rows = [[_num(s["p"]), _num(s["cmax_bpsHz"]), s["serving_set_size"],
                     _num(s["mean_sum_rate"]), _num(s["stderr"]), s["n_samples"]]
                    for s in result.summary]
    return [
        _write_csv(out / "sweep.csv",
                   ["p", "cmax_bpsHz", "serving_set_size", "topo_trial",
                    "mode_trial", "n_cjt", "sum_rate_bpsHz",
                    "recomputed_sum_rate_bpsHz", "iterations", "converged"],
                   sweep_rows),
        _write_csv(out / "summary.csv",
                   ["p", "cmax_bpsHz", "serving_set_size", "mean_sum_rate",
                    "stderr", "n_samples"], summary_rows),
    ]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _float_list(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}") from exc


def _int_list(text: str):
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def _load_cli_config(path: str | None) -> SystemConfig:
    if path is None:
        return SystemConfig()
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    return load_config(path)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfhybrid",
        description="cell-free downlink experiments with hybrid serving modes")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--out", default=".", help="output directory")

    gen = sub.add_parser("gen", help="emit scenario CSVs")
    common(gen)

    conv = sub.add_parser("converge", help="one optimized run with its trace")
    common(conv)
    conv.add_argument("--modes", default=None,
                      help="per-UE flags, 1=coherent (default alternating)")
    conv.add_argument("--t-max", type=int, default=30)

    sw = sub.add_parser("sweep", help="sum rate over the mode-probability grid")
    common(sw)
    sw.add_argument("--p-grid", default=None, help="comma list of probabilities")
    sw.add_argument("--cmax", default=None, help="comma list of fronthaul caps")
    sw.add_argument("--serving-set", default=None,
                    help="comma list of serving-set sizes")
    sw.add_argument("--draws", type=int, default=10, help="topology draws")
    sw.add_argument("--mode-draws", type=int, default=5,
                    help="mode draws per grid point")
    sw.add_argument("--t-max", type=int, default=30)
    return parser


def cli_main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2

    try:
        config = _load_cli_config(args.config)
        if args.cmd == "gen":
            scenario = build_scenario(config, args.seed)
            for path in write_scenario_csvs(scenario, args.out):
                print(path)
        elif args.cmd == "converge":
            text = args.modes
            if text is None:
                text = (DEFAULT_CONVERGE_MODES if config.K == 15
                        else "".join("01"[k % 2] for k in range(config.K)))
            if len(text) != config.K:
                raise ConfigError(
                    f"mode string length {len(text)} != K={config.K}")
            try:
                modes = ModeAssignment.from_string(text)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            result = run_single(config, modes, args.seed, t_max=args.t_max)
            for path in write_scenario_csvs(result.scenario, args.out):
                print(path)
            for path in write_run_csvs(result, args.out):
                print(path)
        else:
            spec = SweepSpec(
                base=config,
                p_grid=_float_list(args.p_grid) if args.p_grid else DEFAULT_P_GRID,
                topology_draws=args.draws,
                mode_draws_per_p=args.mode_draws,
                cmax_grid=_float_list(args.cmax) if args.cmax else None,
                serving_grid=_int_list(args.serving_set) if args.serving_set else None,
                seed=args.seed,
                t_max=args.t_max)
            result = sweep_p(spec)
            for path in write_sweep_csvs(result, args.out):
                print(path)
            if result.n_failed:
                print(f"excluded {result.n_failed} failed runs", file=sys.stderr)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
