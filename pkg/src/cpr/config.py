"""Run configuration: a YAML file with a fixed key set, resolved to dataclasses with every default filled in.

Unknown keys are errors. ``resolve`` turns a (possibly partial) mapping into
the fully materialised form; ``dump`` writes that form back out so that
``resolve(load(dump(x))) == x``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from .checkpoint import CheckpointPolicy, Strategy
from .cost_model import CostParameters, DomainError
from .failure_model import FailureProcess, Family, Scaling
from .simulator import Mode, SimConfig, config_hash, strategy_interval
from .toy.data import DatasetConfig
from .toy.experiment import ToyConfig
from .toy.model import ModelConfig

SEED_ENV = "CPR_SEED"

DEFAULTS: dict = {
    "seed": 0,
    "seeds": 100,
    "cost": {"o_save": 0.0935, "o_load": 0.0935, "o_res": 0.0, "t_fail": 28.0, "t_total": 56.0, "n_emb": 8},
    "failure": {
        "family": "uniform_hazard",
        "mtbf": None,  # None: cost.t_fail
        "shape": 1.0,
        "base_nodes": 1,
        "scaling": "linear_mtbf",
        "node_p": 0.0,
        "burn_in_multiplier": 1.0,
        "burn_in_fraction": 0.0,
        "fixed_failures": 2,
        "fraction_set": [0.5, 0.25, 0.125],
    },
    "policy": {
        "strategy": "cpr_vanilla",
        "t_save": None,  # None: chosen by the strategy
        "r": 0.125,
        "target_pls": 0.1,
        "include_optimizer": True,
        "prioritized_tables": None,  # None: largest tables covering 99% of parameters
    },
    "simulation": {"mode": "analytic", "n_shards": 8, "per_shard_load": False, "table_mass": None},
    "toy": {
        "n_train": 131072,
        "n_test": 16384,
        "vocab_sizes": [20000, 10000, 5000, 2000, 1000, 200, 50, 10],
        "n_dense": 4,
        "zipf_s": 1.05,
        "weight_scale": 0.7,
        "dense_scale": 0.5,
        "bias": -0.5,
        "dim": 16,
        "bottom_hidden": 32,
        "top_hidden": 32,
        "init_scale": 0.05,
        "batch_size": 64,
        "lr": 0.1,
        "lr_emb": 1.0,
        "steps": None,
        "data_seed": None,
        "model_seed": None,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _num(section: dict, key: str, where: str, kind=float, allow_none=False):
    v = section[key]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{where}.{key}' must be a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise ConfigError(f"'{where}.{key}' must be an integer, got {v!r}")
    return kind(v)


def resolve(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults, validate every field and fill derived values."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    cfg["seed"] = _num(cfg, "seed", "config", int)
    cfg["seeds"] = _num(cfg, "seeds", "config", int)
    if cfg["seeds"] < 1:
        raise ConfigError("'seeds' must be >= 1")
    c = cfg["cost"]
    for k in ("o_save", "o_load", "o_res", "t_fail", "t_total", "n_emb"):
        c[k] = _num(c, k, "cost")
    f = cfg["failure"]
    try:
        f["family"] = Family(f["family"]).value
        f["scaling"] = Scaling(f["scaling"]).value
    except ValueError as exc:
        raise ConfigError(f"failure: {exc}") from None
    if f["mtbf"] is None:
        f["mtbf"] = c["t_fail"]
    for k in ("mtbf", "shape", "node_p", "burn_in_multiplier", "burn_in_fraction"):
        f[k] = _num(f, k, "failure")
    f["base_nodes"] = _num(f, "base_nodes", "failure", int)
    f["fixed_failures"] = _num(f, "fixed_failures", "failure", int, allow_none=True)
    if not isinstance(f["fraction_set"], list) or not f["fraction_set"]:
        raise ConfigError("'failure.fraction_set' must be a non-empty list")
    f["fraction_set"] = [float(x) for x in f["fraction_set"]]
    if any(not 0 < x <= 1 for x in f["fraction_set"]):
        raise ConfigError("'failure.fraction_set' entries must lie in (0, 1]")
    p = cfg["policy"]
    try:
        p["strategy"] = Strategy(p["strategy"]).value
    except ValueError as exc:
        raise ConfigError(f"policy: {exc}") from None
    p["target_pls"] = _num(p, "target_pls", "policy")
    if not 0 < p["target_pls"] <= 1:
        raise ConfigError(f"'policy.target_pls' must lie in (0, 1], got {p['target_pls']}")
    p["r"] = _num(p, "r", "policy")
    p["t_save"] = _num(p, "t_save", "policy", allow_none=True)
    p["include_optimizer"] = bool(p["include_optimizer"])
    s = cfg["simulation"]
    try:
        s["mode"] = Mode(s["mode"]).value
    except ValueError as exc:
        raise ConfigError(f"simulation: {exc}") from None
    s["n_shards"] = _num(s, "n_shards", "simulation", int)
    s["per_shard_load"] = bool(s["per_shard_load"])
    t = cfg["toy"]
    for k in ("n_train", "n_test", "n_dense", "dim", "bottom_hidden", "top_hidden", "batch_size"):
        t[k] = _num(t, k, "toy", int)
    for k in ("zipf_s", "weight_scale", "dense_scale", "bias", "init_scale", "lr", "lr_emb"):
        t[k] = _num(t, k, "toy")
    for k in ("steps", "data_seed", "model_seed"):
        t[k] = _num(t, k, "toy", int, allow_none=True)
    t["vocab_sizes"] = [int(v) for v in t["vocab_sizes"]]
    if p["prioritized_tables"] is None:
        p["prioritized_tables"] = list(toy_config(cfg).prioritized)
    p["prioritized_tables"] = sorted(int(x) for x in p["prioritized_tables"])
    if s["table_mass"] is None:
        s["table_mass"] = [float(v * t["dim"]) for v in t["vocab_sizes"]]
    s["table_mass"] = [float(x) for x in s["table_mass"]]
    # build once so field-level domain errors surface here
    try:
        sim = sim_config(cfg)
    except (ValueError, DomainError) as exc:
        raise ConfigError(str(exc)) from None
    if p["t_save"] is None:
        p["t_save"] = float(sim.policy.t_save)
    return cfg


def apply_seed_env(cfg: dict, environ=os.environ) -> dict:
    """``CPR_SEED`` in the environment overrides the config's root seed."""
    value = environ.get(SEED_ENV)
    if value is None:
        return cfg
    try:
        seed = int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None
    return dict(cfg, seed=seed)


def load(path: str | Path | None) -> dict:
    if path is None:
        return resolve({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return resolve(raw)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def cost_parameters(cfg: dict) -> CostParameters:
    return CostParameters(**cfg["cost"])


def failure_process(cfg: dict) -> FailureProcess:
    f = cfg["failure"]
    return FailureProcess.with_mtbf(
        f["family"],
        f["mtbf"],
        f["shape"],
        base_nodes=f["base_nodes"],
        scaling=f["scaling"],
        node_p=f["node_p"],
        burn_in_multiplier=f["burn_in_multiplier"],
        burn_in_fraction=f["burn_in_fraction"],
    )


def toy_config(cfg: dict) -> ToyConfig:
    t = cfg["toy"]
    return ToyConfig(
        dataset=DatasetConfig(
            n_train=t["n_train"],
            n_test=t["n_test"],
            vocab_sizes=tuple(t["vocab_sizes"]),
            n_dense=t["n_dense"],
            zipf_s=t["zipf_s"],
            weight_scale=t["weight_scale"],
            dense_scale=t["dense_scale"],
            bias=t["bias"],
        ),
        model=ModelConfig(t["dim"], t["bottom_hidden"], t["top_hidden"], t["init_scale"]),
        batch_size=t["batch_size"],
        lr=t["lr"],
        lr_emb=t["lr_emb"],
        n_shards=cfg["simulation"]["n_shards"],
        steps=t["steps"],
        data_seed=t["data_seed"],
        model_seed=t["model_seed"],
    )


def sim_config(cfg: dict) -> SimConfig:
    p, s, f = cfg["policy"], cfg["simulation"], cfg["failure"]
    strategy = Strategy(p["strategy"])
    policy = CheckpointPolicy(
        strategy,
        p["t_save"] if p["t_save"] is not None else 1.0,
        p["r"],
        tuple(p["prioritized_tables"]),
        p["include_optimizer"],
    )
    sim = SimConfig(
        cost=cost_parameters(cfg),
        process=failure_process(cfg),
        policy=policy,
        mode=Mode(s["mode"]),
        fraction_set=tuple(f["fraction_set"]),
        n_shards=s["n_shards"],
        target_pls=p["target_pls"],
        fixed_failures=f["fixed_failures"],
        table_mass=tuple(s["table_mass"]),
        per_shard_load=s["per_shard_load"],
        root_seed=cfg["seed"],
        toy=toy_config(cfg) if s["mode"] == Mode.COUPLED.value else None,
    )
    if p["t_save"] is None:
        sim = replace(sim, policy=replace(policy, t_save=strategy_interval(sim, strategy)))
    return sim


def fingerprint(cfg: dict) -> str:
    return config_hash(cfg)


@dataclass(frozen=True)
class RunManifest:
    config_path: str | None
    resolved: dict
    version: str
    seeds: tuple[int, ...]

    @property
    def config_hash(self) -> str:
        return config_hash(self.resolved)

    def as_dict(self) -> dict:
        return {
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "version": self.version,
            "seeds": list(self.seeds),
            "resolved": self.resolved,
        }
