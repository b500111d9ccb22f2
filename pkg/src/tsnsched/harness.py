"""Experiment orchestration behind the command line: configs, seeding, artifacts."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .env import DATA_DIR, EnvConfig, TsnEnv, load_flow_mix, reward_O
from .gcl import export_gcl, load_gcl
from .model import (FlowFileError, Topology, TopologyError, build_topology, derive_datapath, hyperperiod,
                    load_flows, static_queue)
from .scheduler import Infeasible, build_gcls, solve_static, verify_schedule
from .simulator import SimFlow, Simulator, parse_offsets
from .td3 import RetrainRequired, Td3Agent, Td3Config, metrics_csv, run_epoch, train_loop

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_INPUT = 3

MODES = ("solve-static", "simulate", "train", "evaluate", "baseline-ddpg")


class InputError(ValueError):
    """Bad configuration or unreadable input file."""


@dataclass(frozen=True)
class ExperimentConfig:
    topology: str = str(DATA_DIR / "two_bridge_topology.json")
    flows: str = str(DATA_DIR / "static_flows.csv")
    mix: str = str(DATA_DIR / "flow_mix.csv")
    mode: str = "solve-static"
    seed: int = 0
    stream_seed: int = 0
    omega: int = 128
    epochs: int = 200
    rate_bps: int | None = None
    guard_band_ns: int | None = None
    eval_window: int = 4
    max_requests: int = 200
    output: str = "out"
    checkpoint: str | None = None
    checkpoint_every: int = 50
    horizon: int = 10
    gcl: str | None = None
    offsets: str | None = None
    trace: bool = False
    decision_log: bool = False
    warmup: int = 1000
    batch_size: int = 100

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}")
        for name in ("topology", "flows"):
            if not Path(getattr(self, name)).exists():
                raise InputError(f"{name} file {getattr(self, name)} does not exist")
        if self.mode in ("train", "baseline-ddpg", "evaluate") and not Path(self.mix).exists():
            raise InputError(f"flow mix {self.mix} does not exist")
        if self.epochs < 1:
            raise InputError("epochs must be at least 1")
        if self.omega < 1:
            raise InputError("omega must be at least 1")
        if self.eval_window < 1 or self.horizon < 1:
            raise InputError("evaluation window and horizon must be at least 1")
        return self


def load_config(path: str | None = None, **overrides) -> ExperimentConfig:
    """Defaults, then the JSON file, then explicit overrides (``None`` means unset)."""
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"config {path}: {exc}") from None
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown config keys {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None and k in known})
    return ExperimentConfig(**data).validate()


def load_inputs(cfg: ExperimentConfig):
    try:
        spec = json.loads(Path(cfg.topology).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"topology {cfg.topology}: {exc}") from None
    if cfg.rate_bps is not None:
        spec["rate_bps"] = cfg.rate_bps
        for link in spec.get("links", []):
            link.pop("rate_bps", None)
    topo = build_topology(spec)
    return topo, load_flows(cfg.flows, topo)


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve_static(cfg: ExperimentConfig) -> int:
    topo, flows = load_inputs(cfg)
    out = _out(cfg)
    try:
        assign = solve_static(flows, topo, cfg.omega)
    except Infeasible as exc:
        (out / "report.txt").write_text(f"infeasible: {exc}\n")
        logger.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    violations = verify_schedule(assign, flows, topo)
    gcls = build_gcls(assign, flows, topo, cfg.omega)
    (out / "schedule.json").write_text(assign.to_json() + "\n")
    (out / "gcl.csv").write_text(export_gcl(gcls))
    lines = [f"objective z = {assign.objective_z}", f"{len(violations)} violations"]
    lines += [f"constraint {v.constraint} flow {v.flow} NDP{v.ndp} {v.ndp_name}: {v.detail}" for v in violations]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if not violations else EXIT_INFEASIBLE


def cmd_simulate(cfg: ExperimentConfig) -> int:
    topo, flows = load_inputs(cfg)
    out = _out(cfg)
    by_id = {f.id: f for f in flows}
    hp = hyperperiod(flows)
    if cfg.gcl and cfg.offsets:
        gcls = load_gcl(Path(cfg.gcl).read_text(), hp, cfg.omega)
        offsets = parse_offsets(Path(cfg.offsets).read_text())
        missing = set(offsets) - set(by_id)
        if missing:
            raise InputError(f"offsets reference unknown flows {sorted(missing)}")
        sim_flows = []
        for fid, o in sorted(offsets.items()):
            q = o["queue"]
            f = by_id[fid]
            dp = derive_datapath(f, topo, q if q is not None else static_queue(f))
            sim_flows.append(SimFlow(f, dp, o["offset_ns"]))
    else:
        try:
            assign = solve_static(flows, topo, cfg.omega)
        except Infeasible as exc:
            logger.error("infeasible: %s", exc)
            return EXIT_INFEASIBLE
        gcls = build_gcls(assign, flows, topo, cfg.omega)
        sim_flows = [SimFlow(by_id[fid], derive_datapath(by_id[fid], topo, fs.queue), fs.offset)
                     for fid, fs in sorted(assign.flows.items())]
    sim = Simulator(topo, sim_flows, gcls, hp=hp, seed=cfg.seed, trace=cfg.trace,
                    guard_band=cfg.guard_band_ns)
    sim.run_until(cfg.horizon * hp)
    metrics = sim.metrics()
    (out / "metrics.json").write_text(metrics.to_json() + "\n")
    if cfg.trace:
        (out / "trace.csv").write_text(sim.trace_csv())
    print(f"simulated {cfg.horizon} hyperperiods; mean latency {metrics.mean_latency():.1f} ns, "
          f"mean jitter std {metrics.mean_jitter_std():.3f} ns")
    return EXIT_OK


def make_env(cfg: ExperimentConfig, topo: Topology, flows) -> TsnEnv:
    env_cfg = EnvConfig(omega=cfg.omega, eval_hyperperiods=cfg.eval_window, guard_band=cfg.guard_band_ns,
                        max_requests=cfg.max_requests, decision_log=cfg.decision_log)
    return TsnEnv(topo, flows, load_flow_mix(cfg.mix), env_cfg, seed=cfg.stream_seed)


def td3_config(cfg: ExperimentConfig, ddpg: bool = False) -> Td3Config:
    kw = {"omega": cfg.omega, "warmup": cfg.warmup, "batch_size": cfg.batch_size}
    return Td3Config.ddpg(**kw) if ddpg else Td3Config(**kw)


def cmd_train(cfg: ExperimentConfig, ddpg: bool = False, step_hook=None) -> int:
    topo, flows = load_inputs(cfg)
    out = _out(cfg)
    try:
        env = make_env(cfg, topo, flows)
    except Infeasible as exc:
        logger.error("static schedule infeasible: %s", exc)
        return EXIT_INFEASIBLE
    agent = Td3Agent(env.action_dim, td3_config(cfg, ddpg), seed=cfg.seed)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    def on_epoch(m):
        if cfg.checkpoint_every and m.epoch % cfg.checkpoint_every == 0:
            agent.save(ckpt_dir / f"epoch_{m.epoch:05d}.json", topo.signature())

    log = train_loop(env, agent, cfg.epochs, step_hook=step_hook, epoch_hook=on_epoch)
    (out / "metrics.csv").write_text(metrics_csv(log))
    agent.save(out / "checkpoint.json", topo.signature())
    if cfg.decision_log:
        (out / "decisions.csv").write_text(env.decision_log_csv())
    last = log[-1]
    print(f"trained {cfg.epochs} epochs; final admission rate {last.admission_rate:.3f}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    if not cfg.checkpoint:
        raise InputError("evaluate needs --checkpoint")
    topo, flows = load_inputs(cfg)
    out = _out(cfg)
    env = make_env(cfg, topo, flows)
    if not Path(cfg.checkpoint).exists():
        raise InputError(f"checkpoint {cfg.checkpoint} does not exist")
    agent = Td3Agent.load(cfg.checkpoint, topo.signature(), env.action_dim)
    if agent.encoder is not None:
        env.encoder = agent.encoder
    m = run_epoch(env, agent, 1, mode="greedy")
    metrics = env.epoch_metrics
    verdicts = {}
    for fid, f in sorted(env.flows.items()):
        st = metrics.flows.get(fid)
        worst = max(st.latencies) if st and st.latencies else None
        verdicts[fid] = {"deadline_ns": f.deadline, "max_latency_ns": worst,
                         "meets_deadline": bool(st is not None and reward_O([f], metrics) == 1)}
    report = {"total_flows": m.total_flows, "requested_flows": m.requested_flows,
              "admission_rate": m.admission_rate, "avg_latency_ns": m.avg_latency_ns,
              "jitter_std_ns": m.jitter_std_ns, "flows": verdicts}
    (out / "evaluation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"greedy admission rate {m.admission_rate:.3f} over {m.requested_flows} requests")
    return EXIT_OK


def dispatch(cfg: ExperimentConfig) -> int:
    try:
        if cfg.mode == "solve-static":
            return cmd_solve_static(cfg)
        if cfg.mode == "simulate":
            return cmd_simulate(cfg)
        if cfg.mode == "train":
            return cmd_train(cfg)
        if cfg.mode == "baseline-ddpg":
            return cmd_train(cfg, ddpg=True)
        return cmd_evaluate(cfg)
    except RetrainRequired as exc:
        logger.error("%s", exc)
        print(f"error: {exc}")
        return EXIT_INPUT
    except (InputError, TopologyError, FlowFileError, OSError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}")
        return EXIT_INPUT


def _run_seed(args) -> int:
    cfg, seed = args
    return dispatch(replace(cfg, seed=seed, stream_seed=cfg.stream_seed + seed,
                            output=str(Path(cfg.output) / f"seed_{seed}")))


def run_parallel(cfg: ExperimentConfig, k: int) -> int:
    """Run ``k`` independent seeds in separate processes and output directories."""
    seeds = [cfg.seed + i for i in range(k)]
    with ProcessPoolExecutor(max_workers=min(k, os.cpu_count() or 1)) as pool:
        codes = list(pool.map(_run_seed, [(cfg, s) for s in seeds]))
    return max(codes)
