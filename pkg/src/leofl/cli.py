"""Command-line entry point.

Every subcommand is a pure function of (config, seed) returning
``{filename: text}``; ``main`` only parses flags and writes the files.

Exit codes: 0 success, 1 configuration error, 2 runtime error,
3 failed acceptance check (``verify-bound``).
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .analysis import (BOUND_COLUMNS, bound_rows, check_bound, curves_csv, estimate_constants,
                       local_sgd_trace, verify_lemmas)
from .channel import noise_power, shl_budget, sr_sample
from .config import ConfigError, ScenarioConfig, parse_sweep
from .constellation import ContactPlan, SatelliteId, build_walker_delta, visibility_windows, windows_to_csv
from .fl import (Dataset, PartitionMode, generate_synthetic, load_dataset, partition, payload_bits,
                 save_dataset, train_test_split)
from .noma import (NomaUser, OutageScenario, PowerMode, allocate_power, gamma_threshold, oma_rates,
                   order_by_gain, outage_closed_form, outage_monte_carlo, sinr, with_power)
from .protocol import ScenarioError, Simulation, rounds_to_csv
from .seeding import derive_rng, derive_seed
from .units import SPEED_OF_LIGHT, dbm_to_watts

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3

OUTAGE_HEADER = ["p_s_dbm", "rho_ns", "rho_fs", "op_ns_cf", "op_ns_mc", "op_fs_cf", "op_fs_mc",
                 "op_sys_cf", "op_sys_mc", "stderr"]
RATE_HEADER = ["p_s_dbm", "user_count", "sum_rate_bps_hz", "oma_sum_rate_bps_hz"]
RATE_USER_HEADER = ["p_s_dbm", "user_count", "sic_rank", "rate_bps_hz", "oma_rate_bps_hz"]
OMA_HEADER = ["p_s_dbm", "user_count", "noma_sum_rate_bps_hz", "oma_sum_rate_bps_hz",
              "noma_upload_s", "oma_upload_s"]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _rho(cfg: ScenarioConfig, p_s_dbm: float, distance_m: float) -> float:
    """P_s / sigma^2, with the deterministic link gain folded in when configured."""
    rho = dbm_to_watts(p_s_dbm) / noise_power(cfg.channel.noise.to_params())
    link = cfg.channel.link
    if link is not None and cfg.channel.fold_link_budget:
        rho *= shl_budget(link.to_params(), distance_m)
    return rho


def _shell_distance(cfg: ScenarioConfig, shell: int) -> float:
    """Zenith range from the first node to a shell."""
    return cfg.constellation[shell].altitude_km * 1e3 - cfg.nodes[0].altitude_km * 1e3


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------


def cmd_visibility(cfg: ScenarioConfig, t0: float | None = None, t1: float | None = None,
                   dt: float | None = None) -> dict:
    v = cfg.visibility
    t0 = v.t0_s if t0 is None else t0
    t1 = v.t1_s if t1 is None else t1
    dt = v.dt_s if dt is None else dt
    const = build_walker_delta(cfg.shells())
    windows = []
    for node in cfg.ground_nodes():
        windows.extend(visibility_windows(const, node, t0, t1, dt, refine=v.refine))
    windows.sort(key=lambda w: (w.start_s, w.node, w.sat))
    return {"visibility.csv": windows_to_csv(windows)}


# ---------------------------------------------------------------------------
# outage
# ---------------------------------------------------------------------------


def outage_scenario(cfg: ScenarioConfig, p_s_dbm: float) -> OutageScenario:
    """NS on the lowest shell, FS on the highest; the FS is conditioned on the NS mean gain."""
    alts = [s.altitude_km for s in cfg.constellation]
    ns_shell, fs_shell = int(np.argmin(alts)), int(np.argmax(alts))
    fading = cfg.fading()
    d_ns = cfg.outage.ns_distance_km * 1e3 if cfg.outage.ns_distance_km else _shell_distance(cfg, ns_shell)
    d_fs = cfg.outage.fs_distance_km * 1e3 if cfg.outage.fs_distance_km else _shell_distance(cfg, fs_shell)
    rho_ns, rho_fs = _rho(cfg, p_s_dbm, d_ns), _rho(cfg, p_s_dbm, d_fs)
    gamma = gamma_threshold(cfg.noma.target_rate_bps_hz, cfg.noma.gamma_form)
    # NS interference expressed against rho_fs
    terms = ((fading[ns_shell].mean * rho_ns / rho_fs, cfg.noma.a_ns),)
    return OutageScenario(fading[ns_shell], fading[fs_shell], rho_ns, rho_fs, cfg.noma.a_ns, cfg.noma.a_fs,
                          gamma, gamma, terms)


def cmd_outage(cfg: ScenarioConfig, sweep: Sequence[float] | None = None, trials: int | None = None) -> dict:
    sweep = parse_sweep(cfg.outage.sweep_dbm) if sweep is None else list(sweep)
    trials = cfg.outage.trials if trials is None else trials
    rows = []
    for p in sweep:
        sc = outage_scenario(cfg, p)
        cf = outage_closed_form(sc)
        mc = outage_monte_carlo(sc, trials, derive_seed(cfg.seed, "outage", f"{p:.9g}"),
                                conditional=cfg.outage.conditional)
        rows.append([float(p), sc.rho_ns, sc.rho_fs, cf.op_ns, mc.op_ns, cf.op_fs, mc.op_fs,
                     cf.op_system, mc.op_system, mc.std_err])
    return {"outage.csv": _csv(OUTAGE_HEADER, rows)}


# ---------------------------------------------------------------------------
# rate / compare-oma
# ---------------------------------------------------------------------------


def _draw_groups(cfg: ScenarioConfig, count: int):
    """Fading draws per user for one user count; independent of the power sweep."""
    fading = cfg.fading()
    shells = [j % len(cfg.constellation) for j in range(count)]
    draws = []
    for d in range(cfg.rate.draws):
        rng = derive_rng(cfg.seed, "rate", count, d)
        draws.append([float(sr_sample(fading[s], rng)) for s in shells])
    return shells, draws


def _groups(cfg: ScenarioConfig, p_s_dbm: float, count: int, shells, draws):
    mode = PowerMode(cfg.noma.power_mode)
    for gains in draws:
        users = []
        for j, (s, h) in enumerate(zip(shells, gains)):
            d = _shell_distance(cfg, s)
            users.append(NomaUser(SatelliteId(s, 0, j), gain=h * _rho(cfg, p_s_dbm, d),
                                  shell_index=s, distance_m=d))
        group = order_by_gain(users, snr_rho=1.0)
        yield with_power(group, allocate_power(group.users, mode))


def cmd_rate(cfg: ScenarioConfig, sweep: Sequence[float] | None = None) -> dict:
    sweep = parse_sweep(cfg.rate.sweep_dbm) if sweep is None else list(sweep)
    rows, per_user = [], []
    for count in cfg.rate.user_counts:
        shells, draws = _draw_groups(cfg, count)
        for p in sweep:
            noma = np.zeros(count)
            oma = np.zeros(count)
            for group in _groups(cfg, p, count, shells, draws):
                noma += [math.log2(1.0 + sinr(group, k)) for k in range(count)]
                oma += oma_rates(group)
            noma /= len(draws)
            oma /= len(draws)
            rows.append([float(p), count, math.fsum(noma), math.fsum(oma)])
            per_user.extend([float(p), count, k, noma[k], oma[k]] for k in range(count))
    return {"rate.csv": _csv(RATE_HEADER, rows), "rate_per_user.csv": _csv(RATE_USER_HEADER, per_user)}


def cmd_compare_oma(cfg: ScenarioConfig, sweep: Sequence[float] | None = None) -> dict:
    """Upload time of the slowest satellite under NOMA versus an equal OMA split."""
    sweep = parse_sweep(cfg.rate.sweep_dbm) if sweep is None else list(sweep)
    ds = cfg.fl.dataset
    bits = payload_bits((ds.dim + 1) * ds.classes, 1, cfg.protocol.payload_override_bits)
    band = cfg.channel.noise.bandwidth_mhz * 1e6
    rows = []
    for count in cfg.rate.user_counts:
        shells, draws = _draw_groups(cfg, count)
        for p in sweep:
            s_noma, s_oma, t_noma, t_oma = [], [], [], []
            for group in _groups(cfg, p, count, shells, draws):
                r_noma = [math.log2(1.0 + sinr(group, k)) for k in range(count)]
                r_oma = list(oma_rates(group))
                s_noma.append(math.fsum(r_noma))
                s_oma.append(math.fsum(r_oma))
                prop = max(u.distance_m for u in group.users) / SPEED_OF_LIGHT
                t_noma.append(max(bits / (r * band) if r > 0 else math.inf for r in r_noma) + prop)
                t_oma.append(max(bits / (r * band) if r > 0 else math.inf for r in r_oma) + prop)
            rows.append([float(p), count, float(np.mean(s_noma)), float(np.mean(s_oma)),
                         float(np.median(t_noma)), float(np.median(t_oma))])
    return {"compare_oma.csv": _csv(OMA_HEADER, rows)}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def build_dataset(cfg: ScenarioConfig) -> Dataset:
    d = cfg.fl.dataset
    if d.cache_path and Path(d.cache_path).exists():
        ds = load_dataset(d.cache_path)
        if (ds.classes, ds.dim, len(ds)) != (d.classes, d.dim, d.samples):
            raise ConfigError(f"fl.dataset.cache_path: cached data does not match the dataset spec")
        return ds
    ds = generate_synthetic(d.classes, d.dim, d.samples, d.separation, cfg.seed)
    if d.cache_path:
        save_dataset(d.cache_path, ds)
    return ds


def build_simulation(cfg: ScenarioConfig, trace: list | None = None) -> Simulation:
    const = build_walker_delta(cfg.shells())
    nodes = cfg.ground_nodes()
    train, test = train_test_split(build_dataset(cfg), cfg.fl.dataset.test_fraction, cfg.seed)
    shards = partition(train, PartitionMode(cfg.fl.partition), const.ids, cfg.seed)
    term = cfg.protocol.termination.to_termination()
    contacts = ContactPlan.build(const, nodes, term.max_sim_time_s, cfg.protocol.contact_dt_s)
    return Simulation(const, nodes, shards, train.classes, cfg.fl.to_train(), cfg.protocol.to_params(), term,
                      cfg.seed, test_set=test, link=cfg.link_setup(), contacts=contacts, trace=trace)


def cmd_train(cfg: ScenarioConfig, trace: bool = False) -> dict:
    events = [] if trace else None
    records = build_simulation(cfg, events).run()
    out = {"rounds.csv": rounds_to_csv(records)}
    last = records[-1]
    out["summary.txt"] = (f"rounds {last.round}\nsim_time_s {last.sim_time_s:.3f}\nloss {last.loss:.6f}\n"
                          f"accuracy {last.accuracy:.4f}\nbytes_tx_total {sum(r.bytes_transmitted for r in records)}\n")
    if trace:
        from .protocol import trace_to_jsonl

        out["trace.jsonl"] = trace_to_jsonl(events)
    return out


# ---------------------------------------------------------------------------
# verify-bound
# ---------------------------------------------------------------------------


def bound_problem(cfg: ScenarioConfig):
    b = cfg.bound
    ds = generate_synthetic(b.classes, b.dim, b.samples, b.separation, derive_seed(cfg.seed, "bound-data"))
    sats = [SatelliteId(0, 0, k) for k in range(b.satellites)]
    shards = partition(ds, PartitionMode(b.partition), sats, cfg.seed)
    return [shards[s] for s in sats], b.classes


def cmd_verify_bound(cfg: ScenarioConfig, repetitions: int | None = None) -> tuple[dict, bool]:
    b = cfg.bound
    reps = b.repetitions if repetitions is None else repetitions
    shards, classes = bound_problem(cfg)
    out, ok, summary = {}, True, []
    for J in b.local_steps:
        c = estimate_constants(shards, classes, b.l2_reg, J, b.batch_size, cfg.seed)
        traces = [local_sgd_trace(shards, classes, c, b.steps, b.batch_size,
                                  derive_seed(cfg.seed, "bound-rep", J, r), b.l2_reg) for r in range(reps)]
        check = check_bound(traces, c)
        lemmas = verify_lemmas(traces, c)
        out[f"bound_J{J}.csv"] = curves_csv(bound_rows(check), BOUND_COLUMNS)
        ok &= check.holds and lemmas.passed()
        summary.append(f"J={J}: bound {'holds' if check.holds else 'VIOLATED'}; lemma fractions "
                       f"L1 {lemmas.l1_fraction:.3f} L2 {lemmas.l2_fraction:.3f} L3 {lemmas.l3_fraction:.3f}")
        summary.append(check.summary())
    out["bound_summary.txt"] = "\n".join(summary) + "\n"
    return out, ok


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _write(out_dir: Path, files: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        tmp = out_dir / (name + ".tmp")
        tmp.write_text(text)
        tmp.replace(out_dir / name)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="scenario YAML file")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--trials", type=int, help="Monte-Carlo trials / repetitions")
    common.add_argument("--sweep", help="P_s sweep in dBm as start:stop:step")
    parser = argparse.ArgumentParser(prog="leofl", description="LEO federated learning with NOMA and HAPs")
    sub = parser.add_subparsers(dest="command", required=True)
    vis = sub.add_parser("visibility", parents=[common], help="contact windows CSV")
    vis.add_argument("--t0", type=float)
    vis.add_argument("--t1", type=float)
    vis.add_argument("--dt", type=float)
    sub.add_parser("outage", parents=[common], help="outage probability sweep")
    sub.add_parser("rate", parents=[common], help="NOMA sum-rate sweep with OMA column")
    tr = sub.add_parser("train", parents=[common], help="run the FL protocol")
    tr.add_argument("--trace", action="store_true", help="also write the event trace (JSON lines)")
    sub.add_parser("verify-bound", parents=[common], help="check the convergence bound")
    sub.add_parser("compare-oma", parents=[common], help="NOMA vs OMA upload times")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.model_copy(update={"seed": args.seed})
        sweep = parse_sweep(args.sweep) if args.sweep else None
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    status = EXIT_OK
    try:
        if args.command == "visibility":
            files = cmd_visibility(cfg, args.t0, args.t1, args.dt)
        elif args.command == "outage":
            files = cmd_outage(cfg, sweep, args.trials)
        elif args.command == "rate":
            files = cmd_rate(cfg, sweep)
        elif args.command == "compare-oma":
            files = cmd_compare_oma(cfg, sweep)
        elif args.command == "train":
            files = cmd_train(cfg, args.trace)
        else:
            files, ok = cmd_verify_bound(cfg, args.trials)
            status = EXIT_OK if ok else EXIT_ACCEPTANCE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    _write(args.out, files)
    for name in ("summary.txt", "bound_summary.txt"):
        if name in files:
            print(files[name], end="")
    return status


if __name__ == "__main__":
    sys.exit(main())
