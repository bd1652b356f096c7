"""Command-line front end: training, attack evaluation and the theorem labs.

Configuration files are INI-style ``key = value`` sections (``[run]``,
``[env]``, ``[dqn]``, ``[ppo]``, ``[eval]``, ``[lab]``); values are Python
literals or bare strings. ``--set section.key=value`` overrides a file
entry. Unknown sections or keys are rejected with exit code 2; a lab whose
check fails exits with code 3.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import inspect
import math
import os
import sys
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from . import attacks as atk
from .car_dqn import DqnConfig, train_car_dqn
from .car_ppo import PpoConfig, train_car_ppo
from .counterexamples import (DriftMdpParams, Grid1D, comb_grid, drift_mdp, instability_hat_q,
                              linf_closeness_report, lp_necessity_comb_q, measure_sets,
                              non_contraction_witness, random_tabular_mdp, solve_drift)
from .envs import DriftChainEnv, GridAdversaryEnv, PointMassEnv
from .evaluation import DqnAgent, PpoAgent, action_certification_rate, evaluate
from .mdp_core import intrinsic_neighborhood, perturbation_set, value_iteration
from .operators import (bellman_residual, car_fixed_point_run, lp_norm, smoothness_constants,
                        stability_constant, stability_ratio, transition_norm_constant)
from .plots import write_svg
from .tinynet import load_weights, save_weights

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 2, 3


class ConfigError(Exception):
    pass


class CheckFailed(Exception):
    pass


# --- config parsing -----------------------------------------------------------------------

def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("inf", "+inf", "infinity"):
        return math.inf
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError):
        return t


def _coerce(value, default, key):
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return value


def read_config(path: Optional[str], overrides: List[str]) -> Dict[str, Dict[str, object]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = {sec: {k: parse_value(v) for k, v in parser.items(sec)} for sec in parser.sections()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        lhs, rhs = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        cfg.setdefault(sec.strip(), {})[key.strip()] = parse_value(rhs)
    return cfg


def check_sections(cfg: dict, allowed) -> None:
    extra = sorted(set(cfg) - set(allowed))
    if extra:
        raise ConfigError(f"unknown config section(s) {extra}; allowed: {sorted(allowed)}")


def build_dataclass(cls, values: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{section}]")
    defaults = cls()
    kw = {k: _coerce(v, getattr(defaults, k), f"{section}.{k}") for k, v in values.items()}
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def check_keys(values: dict, allowed, section: str) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in [{section}]; allowed: {sorted(allowed)}")


LAB_KEYS = {
    "operator-lab": {"k1": 1.0, "k2": 1.0, "gamma": 0.9, "n_points": 2001, "epsilon": 0.05,
                     "kernel_width": 0.05, "iterations": 50, "neighborhoods": ["intrinsic", "full"]},
    "stability-lab": {"n": 20.0, "delta": 1.0, "eps": 0.08, "gamma": 0.9, "hat_points": 200001,
                      "hat_n": 10.0, "hat_delta": 0.01, "draws": 200},
    "measure-sets": {"delta": 0.1, "epsilons": [0.0, 0.025, 0.05], "constructions": ["linf", "comb"],
                     "n_points": 2001, "gamma": 0.9},
}
RUN_KEYS = {"seed", "threads"}
EVAL_KEYS = {"checkpoint": None, "attacks": ["none", "random", "pgd"], "epsilons": [0.0, 0.4 / 7],
             "episodes": 20, "steps": 10}


# --- environments ----------------------------------------------------------------------------

ENV_DRIFT_KEYS = {"k1", "k2", "step", "gamma", "variant", "kernel_width", "n_points", "lo", "hi",
                  "max_steps"}


def env_factory(env_cfg: dict) -> Callable:
    kw = dict(env_cfg)
    name = kw.pop("name", "grid")
    if name == "grid":
        cls = GridAdversaryEnv
    elif name == "pointmass":
        cls = PointMassEnv
    elif name == "drift":
        check_keys(kw, ENV_DRIFT_KEYS, "env")
        pkeys = {f.name for f in dataclasses.fields(DriftMdpParams)}
        params = DriftMdpParams(**{k: v for k, v in kw.items() if k in pkeys})
        grid = Grid1D(float(kw.get("lo", -1.0)), float(kw.get("hi", 1.0)), int(kw.get("n_points", 201)))
        steps = int(kw.get("max_steps", 200))
        return lambda: DriftChainEnv(params, grid, steps)
    else:
        raise ConfigError(f"unknown environment {name!r}")
    allowed = set(inspect.signature(cls.__init__).parameters) - {"self"}
    check_keys(kw, allowed, "env")
    if "layout" in kw:
        kw["layout"] = tuple(kw["layout"])
    try:
        cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[env]: {exc}") from exc
    return lambda: cls(**kw)


# --- output helpers --------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: str, header: List[str], rows, seed: int, command: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# carlab {__version__} command={command} seed={seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _ini_value(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v) if not isinstance(v, str) else v


def write_resolved(path: str, sections: Dict[str, dict]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, values in sections.items():
        parser[sec] = {k: _ini_value(v) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


# --- commands ------------------------------------------------------------------------------------

def cmd_train_dqn(cfg: dict, seed: int, out: str, threads: int) -> int:
    check_sections(cfg, {"run", "env", "dqn"})
    env_cfg = dict(cfg.get("env", {}))
    env_cfg.setdefault("name", "grid")
    if env_cfg["name"] == "pointmass":
        raise ConfigError("train-dqn needs a discrete-action environment")
    factory = env_factory(env_cfg)
    dqn = build_dataclass(DqnConfig, cfg.get("dqn", {}), "dqn")
    env = factory()
    result = train_car_dqn(env, dqn, seed, eval_env_factory=factory)
    save_weights(result.net, os.path.join(out, "q_net.bin"))
    write_csv(os.path.join(out, "train_log.csv"),
              ["step", "natural_return", "pgd_return", "loss", "epsilon"],
              [(r.step, r.natural_return, r.attacked_return, r.loss, r.epsilon) for r in result.log],
              seed, "train-dqn")
    write_resolved(os.path.join(out, "resolved_config.ini"),
                   {"run": {"seed": seed, "agent": "dqn", "version": __version__},
                    "env": env_cfg, "dqn": dataclasses.asdict(dqn)})
    if result.log:
        _plot_log(os.path.join(out, "train_log.svg"), [r.step for r in result.log],
                  {"natural": [r.natural_return for r in result.log],
                   "pgd": [r.attacked_return for r in result.log]}, "step")
    last = result.log[-1] if result.log else None
    tail = (f" natural={last.natural_return:.4f} pgd={last.attacked_return:.4f}" if last else "")
    print(f"train-dqn seed={seed} steps={dqn.total_steps}{tail} -> {out}")
    return EXIT_OK


def cmd_train_ppo(cfg: dict, seed: int, out: str, threads: int) -> int:
    check_sections(cfg, {"run", "env", "ppo"})
    env_cfg = dict(cfg.get("env", {}))
    env_cfg.setdefault("name", "pointmass")
    if env_cfg["name"] != "pointmass":
        raise ConfigError("train-ppo needs the continuous-action point mass")
    factory = env_factory(env_cfg)
    ppo = build_dataclass(PpoConfig, cfg.get("ppo", {}), "ppo")
    result = train_car_ppo(factory(), ppo, seed, eval_env_factory=factory)
    save_weights(result.policy, os.path.join(out, "policy.bin"))
    save_weights(result.value, os.path.join(out, "value.bin"))
    write_csv(os.path.join(out, "train_log.csv"),
              ["iteration", "natural_return", "mad_return", "policy_loss", "car_loss", "value_loss",
               "epsilon"],
              [(r.iteration, r.natural_return, r.attacked_return, r.policy_loss, r.car_loss,
                r.value_loss, r.epsilon) for r in result.log],
              seed, "train-ppo")
    write_resolved(os.path.join(out, "resolved_config.ini"),
                   {"run": {"seed": seed, "agent": "ppo", "version": __version__},
                    "env": env_cfg, "ppo": dataclasses.asdict(ppo)})
    if result.log:
        _plot_log(os.path.join(out, "train_log.svg"), [r.iteration for r in result.log],
                  {"natural": [r.natural_return for r in result.log],
                   "mad": [r.attacked_return for r in result.log]}, "iteration")
    last = result.log[-1] if result.log else None
    tail = (f" natural={last.natural_return:.4f} mad={last.attacked_return:.4f}" if last else "")
    print(f"train-ppo seed={seed} iterations={ppo.iterations}{tail} -> {out}")
    return EXIT_OK


def _plot_log(path, xs, series, xlabel):
    write_svg(path, {k: (xs, v) for k, v in series.items()}, "evaluation return", xlabel, "return")


def load_agent(checkpoint: str):
    path = os.path.join(checkpoint, "resolved_config.ini")
    if not os.path.isfile(path):
        raise ConfigError(f"no resolved_config.ini in checkpoint {checkpoint!r}")
    saved = read_config(path, [])
    kind = saved["run"]["agent"]
    factory = env_factory(saved.get("env", {}))
    if kind == "dqn":
        return DqnAgent(load_weights(os.path.join(checkpoint, "q_net.bin"))), factory, saved["env"]
    probe = factory()
    gamma = float(saved["ppo"]["gamma"])
    agent = PpoAgent(load_weights(os.path.join(checkpoint, "policy.bin")),
                     load_weights(os.path.join(checkpoint, "value.bin")), gamma,
                     probe.act_low, probe.act_high)
    return agent, factory, saved["env"]


def cmd_attack_eval(cfg: dict, seed: int, out: str, threads: int) -> int:
    check_sections(cfg, {"run", "eval"})
    ev = dict(EVAL_KEYS)
    check_keys(cfg.get("eval", {}), EVAL_KEYS, "eval")
    ev.update(cfg.get("eval", {}))
    if not ev["checkpoint"]:
        raise ConfigError("[eval] checkpoint is required")
    agent, factory, env_cfg = load_agent(str(ev["checkpoint"]))
    allowed = atk.DISCRETE_ATTACKS if agent.kind == "dqn" else atk.CONTINUOUS_ATTACKS
    bad = [a for a in ev["attacks"] if a not in allowed]
    if bad:
        raise ConfigError(f"attack(s) {bad} do not apply to a {agent.kind} agent")
    probe = factory()
    domain = (probe.obs_low, probe.obs_high)
    episodes = int(ev["episodes"])
    env_name = env_cfg.get("name", "grid")
    natural = evaluate(agent, factory, "none", atk.AttackConfig(0.0), episodes, seed, threads,
                       record=True)
    visited = np.concatenate([np.array(r.observations) for r in natural])
    per_episode, summary = [], []
    for eps in ev["epsilons"]:
        acfg = atk.AttackConfig(float(eps), steps=int(ev["steps"]), domain=domain)
        acr = (action_certification_rate(agent.net, visited, float(eps), domain)
               if agent.kind == "dqn" else float("nan"))
        for attack in ev["attacks"]:
            res = evaluate(agent, factory, attack, acfg, episodes, seed, threads)
            for i, r in enumerate(res):
                per_episode.append((env_name, agent.kind, attack, float(eps), i, r.ret))
            summary.append((attack, float(eps), float(np.mean([r.ret for r in res])), acr))
    write_csv(os.path.join(out, "attack_eval.csv"),
              ["env", "agent", "attack", "epsilon", "episode", "return"], per_episode, seed, "attack-eval")
    write_csv(os.path.join(out, "attack_summary.csv"), ["attack", "epsilon", "mean_return", "acr"],
              summary, seed, "attack-eval")
    series = {}
    for attack, eps, mean, _ in summary:
        xs, ys = series.setdefault(attack, ([], []))
        xs.append(eps)
        ys.append(mean)
    write_svg(os.path.join(out, "attack_eval.svg"), series, "mean return under attack", "epsilon", "return")
    for attack, eps, mean, acr in summary:
        print(f"attack-eval {attack} eps={eps:.4g} return={mean:.4f} acr={acr:.4f}")
    return EXIT_OK


def _lab_values(cfg: dict, name: str) -> dict:
    check_sections(cfg, {"run", "lab"})
    vals = dict(LAB_KEYS[name])
    check_keys(cfg.get("lab", {}), vals, "lab")
    vals.update(cfg.get("lab", {}))
    return vals


def cmd_operator_lab(cfg: dict, seed: int, out: str, threads: int) -> int:
    lab = _lab_values(cfg, "operator-lab")
    grid = Grid1D(-1.0, 1.0, int(lab["n_points"]))
    params = DriftMdpParams(k1=float(lab["k1"]), k2=float(lab["k2"]), gamma=float(lab["gamma"]),
                            kernel_width=float(lab["kernel_width"]))
    mdp = drift_mdp(params, grid)
    q_star = value_iteration(mdp)
    base = perturbation_set(grid.points, float(lab["epsilon"]))
    hoods = {"intrinsic": intrinsic_neighborhood(mdp, q_star, base), "full": base}
    rows, series, ok = [], {}, True
    for name in lab["neighborhoods"]:
        if name not in hoods:
            raise ConfigError(f"unknown neighborhood {name!r}")
        q0 = np.zeros_like(q_star)
        consts = smoothness_constants(mdp, hoods[name], q0, pairs="nearest")
        trace = car_fixed_point_run(q0, mdp, hoods[name], int(lab["iterations"]) + 1, q_star, consts)
        for k, e, b in zip(trace.k, trace.errors, trace.bounds):
            rows.append((name, int(k), float(e), float(b), bool(e <= b)))
        series[f"{name} error"] = (list(trace.k), list(trace.errors))
        series[f"{name} bound"] = (list(trace.k), list(trace.bounds))
        ok &= trace.holds
    write_csv(os.path.join(out, "operator_lab.csv"), ["neighborhood", "k", "error", "bound", "holds"],
              rows, seed, "operator-lab")
    write_svg(os.path.join(out, "operator_lab.svg"), series, "CAR iteration error vs bound",
              "k", "sup error", log_y=True)
    print(f"operator-lab holds={ok}")
    if not ok:
        raise CheckFailed("observed error exceeded the bound")
    return EXIT_OK


def cmd_stability_lab(cfg: dict, seed: int, out: str, threads: int) -> int:
    lab = _lab_values(cfg, "stability-lab")
    rows = []
    w = non_contraction_witness(float(lab["n"]), float(lab["delta"]), float(lab["eps"]), float(lab["gamma"]))
    rows.append(("non_contraction", w.operator_gap, w.sup_gap, w.ratio, w.ratio > 1.0))

    grid = Grid1D(-1.0, 1.0, int(lab["hat_points"]))
    mdp, q_star = solve_drift(DriftMdpParams(variant="stay", gamma=float(lab["gamma"])), grid)
    hat = instability_hat_q(q_star, 1.0, 1.0, math.inf, float(lab["hat_n"]), float(lab["hat_delta"]), grid)
    num = lp_norm(hat.q - q_star, math.inf, grid.cell_measure)
    den = lp_norm(bellman_residual(hat.q, mdp), 1.0, grid.cell_measure)
    slack = 1.02
    hat_ok = num * slack >= float(lab["hat_n"]) * den and den <= float(lab["hat_delta"]) * slack
    rows.append(("instability_hat", num, den, num / den, hat_ok))

    rng = np.random.default_rng(seed)
    small = random_tabular_mdp(3, 2, float(lab["gamma"]), seed)
    qs = value_iteration(small)
    c = stability_constant(math.inf, math.inf, small.gamma, transition_norm_constant(small, math.inf),
                           small.n_actions, small.n_states)
    worst = 0.0
    for _ in range(int(lab["draws"])):
        q = qs + rng.normal(0.0, 1.0, qs.shape)
        worst = max(worst, stability_ratio(q, small, math.inf, math.inf, qs).ratio)
    rows.append(("stable_regime", worst, c, worst / c, worst <= c * (1 + 1e-12)))

    write_csv(os.path.join(out, "stability_lab.csv"), ["row", "lhs", "rhs", "ratio", "pass"], rows,
              seed, "stability-lab")
    write_svg(os.path.join(out, "stability_lab.svg"),
              {"ratio": (list(range(len(rows))), [r[3] for r in rows])},
              "stability rows (0 witness, 1 hat, 2 stable)", "row", "ratio", log_y=True)
    for r in rows:
        print(f"stability-lab {r[0]} ratio={r[3]:.6g} pass={r[4]}")
    if not all(r[4] for r in rows):
        raise CheckFailed("a stability row failed")
    return EXIT_OK


def cmd_measure_sets(cfg: dict, seed: int, out: str, threads: int) -> int:
    lab = _lab_values(cfg, "measure-sets")
    delta = float(lab["delta"])
    gamma = float(lab["gamma"])
    epsilons = [float(e) for e in lab["epsilons"]]
    rows, series = [], {}
    for name in lab["constructions"]:
        if name == "linf":
            grid = Grid1D(-1.0, 1.0, int(lab["n_points"]))
            _, q_star = solve_drift(DriftMdpParams(gamma=gamma), grid)
            reps = [linf_closeness_report(q_star, delta, e, 1.0, grid) for e in epsilons]
        elif name == "comb":
            design = max(e for e in epsilons if e > 0) if any(e > 0 for e in epsilons) else 0.05
            grid = comb_grid(1.0, delta, design, gamma)
            _, q_star = solve_drift(DriftMdpParams(gamma=gamma), grid)
            comb = lp_necessity_comb_q(q_star, 1.0, delta, design, grid, gamma)
            reps = [measure_sets(comb.q, q_star, e, grid, tag="comb") for e in epsilons]
        else:
            raise ConfigError(f"unknown construction {name!r}")
        for e, r in zip(epsilons, reps):
            rows.append((name, e, delta, r.m_sub, r.m_adv, r.m_total))
        series[f"{name} m_sub"] = (epsilons, [r.m_sub for r in reps])
        series[f"{name} m_adv"] = (epsilons, [r.m_adv for r in reps])
    write_csv(os.path.join(out, "measure_sets.csv"),
              ["construction", "epsilon", "delta", "m_sub", "m_adv", "m_total"], rows, seed, "measure-sets")
    write_svg(os.path.join(out, "measure_sets.svg"), series, "measure of S_sub and S_adv", "epsilon", "measure")
    for r in rows:
        print(f"measure-sets {r[0]} eps={r[1]:.4g} m_sub={r[3]:.6g} m_adv={r[4]:.6g}")
    return EXIT_OK


COMMANDS = {
    "train-dqn": cmd_train_dqn,
    "train-ppo": cmd_train_ppo,
    "attack-eval": cmd_attack_eval,
    "operator-lab": cmd_operator_lab,
    "stability-lab": cmd_stability_lab,
    "measure-sets": cmd_measure_sets,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="carlab", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"carlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI-style config file")
        p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
        p.add_argument("--out", default="carlab_out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads for episode evaluation")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = read_config(args.config, args.set)
        run = cfg.get("run", {})
        check_keys(run, RUN_KEYS, "run")
        seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        threads = args.threads if args.threads is not None else int(run.get("threads", 1))
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        code = COMMANDS[args.command](cfg, seed, args.out, threads)
        if args.command not in ("train-dqn", "train-ppo"):
            write_resolved(os.path.join(args.out, f"{args.command}.resolved.ini"),
                           {"run": {"seed": seed, "threads": threads, "version": __version__},
                            **{k: v for k, v in cfg.items() if k != "run"}})
        return code
    except ConfigError as exc:
        print(f"carlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # parameter validation inside the constructions
        print(f"carlab: config error: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"carlab: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
