"""Scenario configuration files (JSON, versioned schema)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fleet import WalletTopology
from .orchestrator import CTV, DELETED_KEY, Feerates, UnvaultPolicy
from .threats import (
    AFTER_VAULTING, DEFAULT_PARTITIONS, DEFAULT_SCHEDULE, FEE_BUDGET, SCENARIOS, CompromiseSet, OutcomeClass,
    RunOptions,
)
from .watchtower import Variant

SCHEMA = "vaultlab.scenario/1"
MECHANISMS = (DELETED_KEY, CTV)
SEED_LIMIT = 2 ** 64


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _int(value, name: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"expected integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(name, f"must be >= {lo}")
    if hi is not None and value > hi:
        raise ConfigError(name, f"must be <= {hi}")
    return value


def _bool(value, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(name, f"expected boolean, got {value!r}")
    return value


def _obj(value, name: str, allowed) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(name, "expected object")
    for key in value:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown field")
    return value


def _policy_dict(p: UnvaultPolicy) -> dict:
    return {"max_funds_in_flight": p.max_funds_in_flight,
            "min_blocks_between_unvaults": p.min_blocks_between_unvaults,
            "max_unvaults_in_flight": p.max_unvaults_in_flight}


@dataclass
class ScenarioConfig:
    name: str = "custom"
    scenario: str | None = None
    topology: WalletTopology = field(default_factory=WalletTopology)
    policy: UnvaultPolicy = field(default_factory=UnvaultPolicy)
    mechanism: str = DELETED_KEY
    revault_layers: int = 1
    funds: tuple = DEFAULT_PARTITIONS
    schedule: tuple = DEFAULT_SCHEDULE
    compromise_schedule: tuple = ()      # ((event_index, CompromiseSet), ...); -1 = after vaulting
    seed: int = 0
    feerates: Feerates = field(default_factory=Feerates)
    watchtower_variant: str = Variant.RESPONDER.value
    suspects_recovery: bool = False
    vigilant: bool = True
    fee_budget: int = FEE_BUDGET
    expect: str | None = None

    # -- serialization

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "scenario": self.scenario,
            "topology": self.topology.to_dict(),
            "policy": _policy_dict(self.policy),
            "mechanism": self.mechanism,
            "revault_layers": self.revault_layers,
            "funds": list(self.funds),
            "schedule": list(self.schedule),
            "compromise_schedule": [[idx, cs.to_dict()] for idx, cs in self.compromise_schedule],
            "seed": self.seed,
            "feerates": self.feerates.to_dict(),
            "watchtower_variant": self.watchtower_variant,
            "suspects_recovery": self.suspects_recovery,
            "vigilant": self.vigilant,
            "fee_budget": self.fee_budget,
            "expect": self.expect,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a JSON object")
        known = {f.name for f in fields(cls)} | {"schema"}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown field")
        if data.get("schema") != SCHEMA:
            raise ConfigError("schema", f"expected {SCHEMA!r}, got {data.get('schema')!r}")
        kw: dict = {}

        name = data.get("name", "custom")
        if not isinstance(name, str) or not name:
            raise ConfigError("name", "expected non-empty string")
        kw["name"] = name

        sid = data.get("scenario")
        if sid is not None and sid not in SCENARIOS:
            raise ConfigError("scenario", f"unknown scenario id {sid!r}")
        kw["scenario"] = sid

        topo = _obj(data.get("topology", {}), "topology", WalletTopology.__dataclass_fields__)
        for key, value in topo.items():
            _int(value, f"topology.{key}")
        try:
            kw["topology"] = WalletTopology(**topo)
        except ValueError as exc:
            raise ConfigError("topology", str(exc).removeprefix("topology: ")) from None
        tp = kw["topology"]

        pol = _obj(data.get("policy", {}), "policy", ("max_funds_in_flight", "min_blocks_between_unvaults",
                                                      "max_unvaults_in_flight"))
        if pol.get("max_funds_in_flight") is not None:
            _int(pol["max_funds_in_flight"], "policy.max_funds_in_flight", 0)
        for key in ("min_blocks_between_unvaults", "max_unvaults_in_flight"):
            if key in pol:
                _int(pol[key], f"policy.{key}", 0)
        try:
            kw["policy"] = UnvaultPolicy(**pol)
        except ValueError as exc:
            raise ConfigError("policy", str(exc).removeprefix("policy: ")) from None

        mech = data.get("mechanism", DELETED_KEY)
        if mech not in MECHANISMS:
            raise ConfigError("mechanism", f"expected one of {list(MECHANISMS)}, got {mech!r}")
        kw["mechanism"] = mech
        kw["revault_layers"] = _int(data.get("revault_layers", 1), "revault_layers", 1, 4)

        funds = data.get("funds", list(DEFAULT_PARTITIONS))
        if not isinstance(funds, list) or not funds:
            raise ConfigError("funds", "expected non-empty list of amounts")
        kw["funds"] = tuple(_int(v, f"funds[{i}]", 1) for i, v in enumerate(funds))

        sched = data.get("schedule", list(DEFAULT_SCHEDULE))
        if not isinstance(sched, list):
            raise ConfigError("schedule", "expected list of partition indices")
        kw["schedule"] = tuple(_int(v, f"schedule[{i}]", 0, len(funds) - 1) for i, v in enumerate(sched))

        comp = data.get("compromise_schedule", [])
        if not isinstance(comp, list):
            raise ConfigError("compromise_schedule", "expected list of [event_index, compromise] pairs")
        entries = []
        for i, entry in enumerate(comp):
            where = f"compromise_schedule[{i}]"
            if not isinstance(entry, list) or len(entry) != 2:
                raise ConfigError(where, "expected [event_index, compromise]")
            idx = _int(entry[0], f"{where}[0]", AFTER_VAULTING)
            if not isinstance(entry[1], dict):
                raise ConfigError(f"{where}[1]", "expected object")
            try:
                cs = CompromiseSet.from_dict(entry[1])
                cs.validate(tp)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}[1]", str(exc)) from None
            entries.append((idx, cs))
        kw["compromise_schedule"] = tuple(entries)

        kw["seed"] = _int(data.get("seed", 0), "seed", 0, SEED_LIMIT - 1)

        fr = _obj(data.get("feerates", {}), "feerates", ("owner", "attacker", "bribe", "recovery"))
        kw["feerates"] = Feerates(**{k: _int(v, f"feerates.{k}", 0) for k, v in fr.items()})

        variant = data.get("watchtower_variant", Variant.RESPONDER.value)
        if variant not in {v.value for v in Variant}:
            raise ConfigError("watchtower_variant", f"unknown variant {variant!r}")
        kw["watchtower_variant"] = variant
        kw["suspects_recovery"] = _bool(data.get("suspects_recovery", False), "suspects_recovery")
        kw["vigilant"] = _bool(data.get("vigilant", True), "vigilant")
        kw["fee_budget"] = _int(data.get("fee_budget", FEE_BUDGET), "fee_budget", 0)

        expect = data.get("expect")
        if expect is not None and expect not in {c.value for c in OutcomeClass}:
            raise ConfigError("expect", f"unknown outcome class {expect!r}")
        kw["expect"] = expect
        return cls(**kw)

    @classmethod
    def loads(cls, text: str) -> "ScenarioConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", f"line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from None
        return cls.loads(text)

    # -- execution inputs

    def run_options(self) -> RunOptions:
        return RunOptions(topology=self.topology, policy=self.policy, mechanism=self.mechanism,
                          revault_layers=self.revault_layers, partitions=self.funds, schedule=self.schedule,
                          feerates=self.feerates, seed=self.seed, watchtower_variant=Variant(self.watchtower_variant),
                          suspects_recovery=self.suspects_recovery, vigilant=self.vigilant,
                          fee_budget=self.fee_budget)

    def base_compromise(self) -> CompromiseSet:
        """Catalogue compromise plus every delta applied after vaulting."""
        cs = SCENARIOS[self.scenario].compromise(self.topology) if self.scenario else CompromiseSet()
        for idx, delta in self.compromise_schedule:
            if idx == AFTER_VAULTING:
                cs = cs.union(delta)
        return cs

    def timed_compromise(self) -> tuple:
        return tuple((idx, cs) for idx, cs in self.compromise_schedule if idx != AFTER_VAULTING)

    def recovery_trigger(self) -> bool:
        return bool(self.scenario) and SCENARIOS[self.scenario].recovery_trigger


def bundled_dir() -> Path:
    return Path(__file__).parent / "scenarios"


def bundled(name: str) -> ScenarioConfig:
    return ScenarioConfig.load(bundled_dir() / f"{name}.json")


def bundled_names() -> list[str]:
    return sorted(p.stem for p in bundled_dir().glob("*.json"))
