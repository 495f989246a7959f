"""Experiment configuration, seeded orchestration and reports.

A config is a flat INI file (see ``configs/demo.ini``).  Every experiment is
deterministic in its seeds: the plant noise, the information-gathering
executions and the closed-loop runs all draw from seeded generators, and all
outputs are CSV files with round-trip float formatting.
"""
from __future__ import annotations

import configparser
import csv
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import bayes, meta, ocp
from .dynamics import (BETA, DT, E, NOMINAL, V, PlantParams, make_reference, rollout,
                       sample_plant_ensemble)

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / "configs"
SCENARIOS = ("figure8", "drift_initiation", "circle", "straight")
ADAPTATIONS = ("none", "offline", "online")
CONDITION_NAMES = {"none": "Prior", "offline": "Offline", "online": "Online"}
COVARIANCE_CONDITIONS = ("Prior", "Once-OCP", "Once-Info-OCP", "Twice-Info-OCP")
DIM_NAMES = ("r", "v", "beta", "omega_r")
DRIFT_THRESHOLD = 0.25
DRIFT_DWELL = 1.0
REFERENCE_KEYS = {
    "figure8": ("radius", "beta", "laps", "half_width", "transition"),
    "drift_initiation": ("v0", "straight", "radius", "beta", "duration", "half_width", "transition"),
    "circle": ("radius", "duration", "half_width", "beta", "speed"),
    "straight": ("v0", "v1", "steps", "half_width"),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scenarios: tuple = ("figure8",)
    seeds: tuple = (0, 1, 2)
    adaptation: str = "offline"
    rounds: int = 2
    out: str = "out"
    # target plant: overrides of the base vehicle parameters
    plant: dict = field(default_factory=dict)
    ensemble_seed: int = 0
    ensemble_size: int = 8
    checkpoint: str = "checkpoint.json"
    epochs: int = 150
    dataset_steps: int = 60
    train_seed: int = 0
    horizon: int = 15
    max_iter: int = 3
    alpha: float = 1.0
    info_horizon: int = 45
    init_noise: float = 1.0
    references: dict = field(default_factory=dict)  # scenario -> params

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("[experiment] seeds: need at least one seed")
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"[experiment] scenarios: unknown scenario {s!r}")
        if self.adaptation not in ADAPTATIONS:
            raise ConfigError(f"[experiment] adaptation: must be one of {ADAPTATIONS}")
        for key, lo in (("rounds", 0), ("ensemble_size", 1), ("epochs", 0), ("dataset_steps", 10),
                        ("horizon", 1), ("max_iter", 1), ("info_horizon", 1)):
            if getattr(self, key) < lo:
                raise ConfigError(f"{_key_label(key)}: must be >= {lo}")
        if self.alpha < 0:
            raise ConfigError("[ocp] alpha: must be non-negative")
        if self.init_noise < 0:
            raise ConfigError("[experiment] init_noise: must be non-negative")
        try:
            self.target_plant()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[plant] {exc}") from exc

    def target_plant(self):
        return replace(NOMINAL, **self.plant)

    def reference(self, scenario):
        return make_reference(scenario, self.references.get(scenario, {}), vehicle=self.target_plant())

    def info_reference(self):
        return make_reference("straight", self.references.get("straight", {}))

    def ocp_spec(self, reference, mode="Nominal", horizon=None, max_iter=None):
        return ocp.OcpSpec(horizon or self.horizon, reference.x_ref[0], reference, mode=mode,
                           alpha=self.alpha, max_iter=max_iter or self.max_iter)

    def info_spec(self, mode="Info"):
        ref = self.info_reference()
        return ocp.OcpSpec(self.info_horizon, ref.x_ref[0], ref, mode=mode, alpha=self.alpha)


# INI layout: section -> {key: (field, parser)}
def _int_list(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _str_list(text):
    return tuple(t for t in text.replace(",", " ").split())


LAYOUT = {
    "experiment": {"name": ("name", str), "scenarios": ("scenarios", _str_list),
                   "seeds": ("seeds", _int_list), "adaptation": ("adaptation", str),
                   "rounds": ("rounds", int), "out": ("out", str),
                   "init_noise": ("init_noise", float)},
    "ensemble": {"seed": ("ensemble_seed", int), "size": ("ensemble_size", int)},
    "model": {"checkpoint": ("checkpoint", str), "epochs": ("epochs", int),
              "dataset_steps": ("dataset_steps", int), "train_seed": ("train_seed", int)},
    "ocp": {"horizon": ("horizon", int), "max_iter": ("max_iter", int), "alpha": ("alpha", float),
            "info_horizon": ("info_horizon", int)},
}


def _key_label(field_name):
    for section, keys in LAYOUT.items():
        for key, (name, _) in keys.items():
            if name == field_name:
                return f"[{section}] {key}"
    return field_name


def resolve_config_path(name):
    """A path to an INI file, or the name of a shipped config such as ``demo``."""
    p = Path(name)
    if p.is_file():
        return p
    shipped = CONFIG_DIR / f"{name}.ini"
    if shipped.is_file():
        return shipped
    raise ConfigError(f"config {name!r} is neither a file nor a shipped config")


def load_config(name):
    """Parse an INI config; relative paths are taken relative to its directory."""
    path = resolve_config_path(name)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_parser(parser, path.parent)


def config_from_parser(parser, base_dir="."):
    kw = {}
    plant, refs = {}, {}
    plant_fields = {f.name for f in fields(PlantParams)} - {"noise_std"}
    for section in parser.sections():
        items = parser[section]
        if section in LAYOUT:
            for key, text in items.items():
                if key not in LAYOUT[section]:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                name, conv = LAYOUT[section][key]
                try:
                    kw[name] = conv(text)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from exc
        elif section == "plant":
            for key, text in items.items():
                if key not in plant_fields:
                    raise ConfigError(f"[plant] {key}: unknown vehicle parameter")
                plant[key] = _float(section, key, text)
        elif section.startswith("reference."):
            kind = section.split(".", 1)[1]
            if kind not in REFERENCE_KEYS:
                raise ConfigError(f"[{section}]: unknown reference kind {kind!r}")
            params = {}
            for key, text in items.items():
                if key not in REFERENCE_KEYS[kind]:
                    raise ConfigError(f"[{section}] {key}: unknown key")
                params[key] = _float(section, key, text)
            refs[kind] = params
        else:
            raise ConfigError(f"[{section}]: unknown section")
    if "checkpoint" in kw and not os.path.isabs(kw["checkpoint"]):
        kw["checkpoint"] = str(Path(base_dir) / kw["checkpoint"])
    cfg = ExperimentConfig(plant=plant, references=refs, **kw)
    for kind, params in refs.items():
        try:
            make_reference(kind, params, vehicle=cfg.target_plant())
        except ValueError as exc:
            raise ConfigError(f"[reference.{kind}]: {exc}") from exc
    return cfg


def _float(section, key, text):
    try:
        val = float(text)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r}") from exc
    if not math.isfinite(val):
        raise ConfigError(f"[{section}] {key}: must be finite")
    return val


def output_dir(config, override=None):
    """``override`` (a CLI flag) wins over ``DRIFTLAB_OUT``, which wins over the config."""
    out = override or os.environ.get("DRIFTLAB_OUT") or config.out
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_model(config):
    if not Path(config.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint {config.checkpoint} does not exist")
    net, belief, _ = bayes.load_checkpoint(config.checkpoint)
    return net, belief


# ---------------------------------------------------------------------------
# records and metrics


@dataclass
class RunRecord:
    scenario: str
    condition: str
    seed: int
    status: str  # Completed | SpinOut | SolverFailure
    steps: int
    rms_e: float
    max_e: float
    max_beta: float
    initiation_distance: float
    initiated: bool
    cov: tuple  # (r, v, beta, omega_r, total) spectral norms of the belief used
    qp_failures: int = 0
    log_path: str = ""

    HEADER = ("scenario", "condition", "seed", "status", "steps", "rms_e", "max_e", "max_beta",
              "initiation_distance", "initiated", "cov_r", "cov_v", "cov_beta", "cov_omega_r",
              "cov_total", "qp_failures", "log_path")

    def row(self):
        return [self.scenario, self.condition, self.seed, self.status, self.steps,
                _fmt(self.rms_e), _fmt(self.max_e), _fmt(self.max_beta),
                _fmt(self.initiation_distance), int(self.initiated),
                *(_fmt(c) for c in self.cov), self.qp_failures, self.log_path]

    @classmethod
    def from_row(cls, d):
        cov = tuple(float(d[k]) for k in ("cov_r", "cov_v", "cov_beta", "cov_omega_r", "cov_total"))
        return cls(d["scenario"], d["condition"], int(d["seed"]), d["status"], int(d["steps"]),
                   float(d["rms_e"]), float(d["max_e"]), float(d["max_beta"]),
                   float(d["initiation_distance"]), bool(int(d["initiated"])), cov,
                   int(d["qp_failures"]), d["log_path"])


def _fmt(v):
    return repr(float(v))


def initiation_distance(log, threshold=DRIFT_THRESHOLD, dwell=DRIFT_DWELL):
    """Distance driven until ``|beta|`` first exceeds ``threshold`` and stays
    above it for ``dwell`` seconds.

    Returns ``(distance, initiated)``; without a qualifying drift the whole
    distance driven is returned with ``initiated`` False.
    """
    beta = np.abs(log.x[:, BETA])
    dist = np.concatenate([[0.0], np.cumsum(log.x[:-1, V] * DT)])
    need = int(round(dwell / DT))
    above = beta > threshold
    run = 0
    for k in range(len(above) - 1, -1, -1):
        run = run + 1 if above[k] else 0
        above[k] = run > need
    hits = np.flatnonzero(above)
    if len(hits):
        return float(dist[hits[0]]), True
    return float(dist[-1]), False


def log_metrics(log):
    """Metrics recomputable from a trajectory log alone."""
    e = log.x[:, E]
    dist, ok = initiation_distance(log)
    return {"steps": len(log) - 1, "rms_e": float(np.sqrt(np.mean(e * e))),
            "max_e": float(np.max(np.abs(e))), "max_beta": float(np.max(np.abs(log.x[:, BETA]))),
            "initiation_distance": dist, "initiated": ok}


def covariance_norms(belief):
    norms = [bayes.covariance_norm(belief, i) for i in range(len(DIM_NAMES))]
    return tuple(norms) + (float(sum(norms)),)


def write_records(path, records):
    records = sorted(records, key=lambda r: (r.scenario, r.condition, r.seed))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RunRecord.HEADER)
        for r in records:
            wr.writerow(r.row())


def read_records(path):
    with open(path, newline="") as fh:
        return [RunRecord.from_row(d) for d in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# experiments


def _round_seed(seed, k):
    return 1000 * int(seed) + k


def gather(config, net, prior, seed, rounds=None, out=None):
    """Chained information-gathering rounds on the target plant.

    Returns the list of beliefs after each round (the prior first) and the
    execution logs.
    """
    plant = config.target_plant()
    spec = config.info_spec("Info")
    beliefs, logs = [prior], []
    for k in range(config.rounds if rounds is None else rounds):
        lg, b, sol = ocp.info_gathering_round(net, beliefs[-1], spec, plant, _round_seed(seed, k))
        lg.meta.update({"round": k, "plan_status": sol.status})
        beliefs.append(b)
        logs.append(lg)
        if out is not None:
            lg.to_csv(Path(out) / f"gather_seed{seed}_round{k}.csv")
    return beliefs, logs


def run_covariance_study(config, net=None, prior=None, out=None):
    """Covariance norms of the prior and of the beliefs adapted on one
    Nominal-OCP execution, one Info-OCP execution and two chained Info-OCP
    executions, per seed.

    Returns ``{seed: {condition: (r, v, beta, omega_r, total)}}``; with ``out``
    the per-seed rows and the median table are written.
    """
    if net is None:
        net, prior = load_model(config)
    plant = config.target_plant()
    results = {}
    for seed in config.seeds:
        _, once_nom, _ = ocp.info_gathering_round(net, prior, config.info_spec("Nominal"), plant,
                                                  _round_seed(seed, 0))
        beliefs, _ = gather(config, net, prior, seed, rounds=2)
        results[seed] = {"Prior": covariance_norms(prior), "Once-OCP": covariance_norms(once_nom),
                         "Once-Info-OCP": covariance_norms(beliefs[1]),
                         "Twice-Info-OCP": covariance_norms(beliefs[2])}
    if out is not None:
        write_covariance(Path(out), results)
    return results


def covariance_table(results):
    """Median over seeds: rows r, v, beta, omega_r, Total; one column per condition."""
    rows = []
    for i, name in enumerate(DIM_NAMES + ("Total",)):
        rows.append((name, [float(np.median([results[s][c][i] for s in sorted(results)]))
                            for c in COVARIANCE_CONDITIONS]))
    return rows


def write_covariance(out, results):
    with open(out / "covariance_table.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("dimension",) + COVARIANCE_CONDITIONS)
        for name, vals in covariance_table(results):
            wr.writerow([name] + [_fmt(v) for v in vals])
    with open(out / "covariance_seeds.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("seed", "condition") + DIM_NAMES + ("total",))
        for seed in sorted(results):
            for c in COVARIANCE_CONDITIONS:
                wr.writerow([seed, c] + [_fmt(v) for v in results[seed][c]])


def initial_state(config, reference, seed):
    """Reference start, perturbed for drifting scenarios (the run starts mid-drift)."""
    x0 = reference.x_ref[0].copy()
    if reference.kind == "figure8" and config.init_noise > 0:
        rng = np.random.default_rng(_round_seed(seed, 999))
        x0 += config.init_noise * rng.normal(0.0, 1.0, 6) * np.array([0.02, 0.1, 0.01, 0.1, 0.05, 0.01])
    return x0


def closed_loop(config, net, belief, scenario, seed, online=False, condition="", out=None):
    """One closed-loop MPC run on the target plant; returns a :class:`RunRecord`."""
    plant = config.target_plant()
    ref = config.reference(scenario)
    spec = config.ocp_spec(ref)
    ctl = ocp.MpcController(net, belief, spec, online=online)
    x0 = initial_state(config, ref, seed)
    meta_info = {"condition": condition, "online": online}
    try:
        lg = rollout(plant, ctl, ref, ref.n_steps, seed, x0=x0, meta=meta_info)
        status = "Completed" if lg.meta["status"] == "Completed" else "SpinOut"
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("solver failure in %s/%s seed %d: %s", scenario, condition, seed, exc)
        return RunRecord(scenario, condition, seed, "SolverFailure", ctl.state.step, math.nan,
                         math.nan, math.nan, math.nan, False, covariance_norms(belief),
                         ctl.state.statuses.count("QpFailure"))
    m = log_metrics(lg)
    path = ""
    if out is not None:
        name = f"{scenario}_{condition}_seed{seed}.csv"
        lg.to_csv(Path(out) / name)
        path = name
    final_belief = ctl.state.belief
    return RunRecord(scenario, condition, seed, status, m["steps"], m["rms_e"], m["max_e"],
                     m["max_beta"], m["initiation_distance"], m["initiated"],
                     covariance_norms(final_belief), ctl.state.statuses.count("QpFailure"), path)


def run_drift_eval(config, adaptations=None, net=None, prior=None, out=None):
    """Closed-loop runs for every scenario, seed and adaptation schedule.

    ``offline`` adapts on ``config.rounds`` chained Info-OCP executions and
    then freezes the belief; ``online`` starts from the prior and updates at
    every control step; ``none`` keeps the prior.
    """
    if net is None:
        net, prior = load_model(config)
    adaptations = adaptations or (config.adaptation,)
    records = []
    for seed in config.seeds:
        adapted = None
        for adaptation in adaptations:
            belief = prior
            if adaptation == "offline":
                if adapted is None:
                    adapted = gather(config, net, prior, seed, out=out)[0][-1]
                belief = adapted
            for scenario in config.scenarios:
                records.append(closed_loop(config, net, belief, scenario, seed,
                                           online=adaptation == "online",
                                           condition=CONDITION_NAMES[adaptation], out=out))
    return records


def report(records, out):
    """Per-condition medians plus the raw records, as CSV."""
    if not records:
        raise ValueError("no records to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "runs.csv", records)
    groups = {}
    for r in records:
        groups.setdefault((r.scenario, r.condition), []).append(r)
    header = ("scenario", "condition", "runs", "completed", "spinout", "solver_failure",
              "median_rms_e", "median_max_e", "median_max_beta", "median_initiation_distance",
              "initiated", "median_cov_total")
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for key in sorted(groups):
            rs = groups[key]

            def med(attr):
                vals = [getattr(r, attr) for r in rs if r.status != "SolverFailure"]
                return _fmt(np.median(vals)) if vals else "nan"

            wr.writerow([key[0], key[1], len(rs), sum(r.status == "Completed" for r in rs),
                         sum(r.status == "SpinOut" for r in rs),
                         sum(r.status == "SolverFailure" for r in rs),
                         med("rms_e"), med("max_e"), med("max_beta"), med("initiation_distance"),
                         sum(r.initiated for r in rs), _fmt(np.median([r.cov[-1] for r in rs]))])
    return out / "summary.csv"


def train_checkpoint(config, path, curve_path=None):
    """Meta-train on the configured plant ensemble and save a checkpoint."""
    ensemble = sample_plant_ensemble(config.ensemble_seed, config.ensemble_size)
    data = meta.build_dataset(ensemble, seed=config.ensemble_seed, steps=config.dataset_steps)
    res = meta.meta_train(data, meta.TrainConfig(epochs=config.epochs, seed=config.train_seed))
    bayes.save_checkpoint(path, res.net, res.belief,
                          {"epochs": config.epochs, "ensemble_seed": config.ensemble_seed,
                           "ensemble_size": config.ensemble_size, "status": res.status})
    if curve_path is not None:
        meta.write_curve(curve_path, res.curve)
    return res


def run_pipeline(config, out):
    """Meta-train, gather, covariance study, drift evaluation and report."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    train_checkpoint(config, ckpt, out / "training_curve.csv")
    config = replace(config, checkpoint=str(ckpt))
    net, prior = load_model(config)
    run_covariance_study(config, net, prior, out)
    records = run_drift_eval(config, ("none", "offline"), net, prior, out)
    return report(records, out)
