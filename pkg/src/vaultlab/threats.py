"""Adversary model, attacker strategies, scenario catalogue and tolerance oracle."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field, fields, replace
from enum import Enum

from . import covenants as cv
from .chain import Chain, Visibility
from .fleet import (
    AdversaryKnowledge, ChannelState, Lost, NotFound, Payload, Role, WalletTopology, human_check,
    multisig_groups,
)
from .interpreter import verify_input
from .orchestrator import (
    CTV, DELETED_KEY, Feerates, RecoveryKind, UnvaultPolicy, World, bootstrap, run_recovery, run_unvault,
)
from .script import Script, multisig_script
from .txkit import KeyPair, OutPoint, Transaction, TxInput, TxOutput, compute_txid, sign_input
from .watchtower import Alert, Variant

DEFAULT_PARTITIONS = (1_000_000, 2_000_000, 3_000_000)
DEFAULT_SCHEDULE = (0, 1)
FEE_BUDGET = 50_000
AFTER_VAULTING = -1
BRUTE_FORCE_BOUND = 4


class OutcomeClass(Enum):
    NO_LOSS = "NoLoss"
    LIMITED_LOSS = "LimitedLoss"
    CATASTROPHIC = "Catastrophic"

    @property
    def rank(self) -> int:
        return {"NoLoss": 0, "LimitedLoss": 1, "Catastrophic": 2}[self.value]


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class CompromiseSet:
    recovery: int = 0          # recovery HMs whose keys leak
    active: int = 0
    vault_keys: int = 0        # vault HMs compromised before their keys are deleted
    avt_storage: bool = False
    p2rw_storage: bool = False
    watchtowers: int = 0
    channels: int = 0          # watchtower nodes whose owner channels are controlled
    fee: int = 0
    human_check: bool = False  # both in-band and out-of-band channels

    def validate(self, tp: WalletTopology) -> None:
        limits = {"recovery": tp.n, "active": tp.k, "vault_keys": tp.t, "watchtowers": tp.W,
                  "channels": tp.W, "fee": tp.b}
        for name, limit in limits.items():
            value = getattr(self, name)
            if not 0 <= value <= limit:
                raise ValueError(f"compromise.{name}={value} outside 0..{limit}")

    def union(self, other: "CompromiseSet") -> "CompromiseSet":
        merged = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            merged[f.name] = (a or b) if isinstance(a, bool) else max(a, b)
        return CompromiseSet(**merged)

    def __le__(self, other: "CompromiseSet") -> bool:
        return all(getattr(self, f.name) <= getattr(other, f.name) for f in fields(self))

    @property
    def empty(self) -> bool:
        return self == CompromiseSet()

    def labels(self) -> list[str]:
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is True:
                out.append(f.name)
            elif value:
                out.append(f"{f.name}={value}")
        return out

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name)}

    @classmethod
    def from_dict(cls, data: dict) -> "CompromiseSet":
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"compromise: unknown field {key!r}")
        for key, value in data.items():
            want = bool if known[key].type in ("bool", bool) else int
            if want is bool and not isinstance(value, bool):
                raise ValueError(f"compromise.{key} must be a boolean")
            if want is int and (isinstance(value, bool) or not isinstance(value, int)):
                raise ValueError(f"compromise.{key} must be an integer")
        return cls(**data)

    def without_vault_keys(self) -> "CompromiseSet":
        return replace(self, vault_keys=0)


# -- compromise application ----------------------------------------------------------


def apply_compromise(world: World, cs: CompromiseSet) -> None:
    """Hand the adversary everything the compromised components hold."""
    fleet, adv, now = world.fleet, world.fleet.adversary, world.fleet.clock
    cs.validate(world.topology)
    for role, count in ((Role.RECOVERY, cs.recovery), (Role.ACTIVE, cs.active), (Role.FEE, cs.fee)):
        for hm in fleet.by_role(role)[:count]:
            hm.compromise(now, adv, keys=True, storage=False)
    for hm in fleet.by_role(Role.VAULT)[:cs.vault_keys]:
        hm.compromise(now, adv, keys=True, storage=False)
    if cs.avt_storage:
        holders = [fleet.hms[h] for pair in world.pairs for h in fleet.avt_holders.get(pair.vault_txid, [])
                   if h in fleet.hms]
        target = holders[0] if holders else fleet.by_role(Role.VAULT)[0]
        target.compromise(now, adv, keys=False, storage=True)
        adv.seen_items.add("avt-storage")
    if cs.p2rw_storage and fleet.p2rw_devices:
        fleet.p2rw_devices[0].compromise(now, adv)
        adv.seen_items.add("p2rw-storage")
    for node in world.watchtowers[:cs.watchtowers]:
        node.compromised_by_adversary = True
        for tx in node.stored_p2rw.values():
            adv.learn_tx(tx)
        adv.seen_items |= {t.hex() for t in node.watched_txids}
    for node in world.watchtowers[:cs.channels]:
        for ch in node.channels:
            ch.compromised = True
        adv.channel_control.add(node.node_id)
    if cs.human_check:
        fleet.channels = ChannelState(True, True)
        adv.channel_control.add("human-check")


# -- the attacker -----------------------------------------------------------------------


STRATEGIES = ("passive", "loot", "wait_recovery", "p2rw_snipe", "avt_flood", "avt_flood_silent",
              "full", "full_silent", "fake_unvault", "unvault_steal", "max_profit", "silent_drain",
              "deposit_theft", "deposit_race", "payment_attack")


class Attacker:
    """Acts through chain submissions, forged alerts and interface tampering only."""

    def __init__(self, world: World, cs: CompromiseSet, strategy: str, rng: random.Random,
                 schedule=DEFAULT_SCHEDULE, target: int | None = None):
        self.world = world
        self.cs = cs
        self.strategy = strategy
        self.rng = rng
        self.schedule = tuple(schedule)
        self.adv: AdversaryKnowledge = world.fleet.adversary
        self.key = KeyPair(rng.randbytes(32), "attacker")
        self.script = multisig_script(1, [self.key.public])
        world.attacker_scripts.add(self.script.to_bytes())
        self.stolen: set[OutPoint] = set()
        self.pending_active: dict[bytes, tuple] = {}   # vault txid -> (pair, source tx, template)
        self.seen_avts: list[bytes] = []
        self.target = target
        self.struck = False
        self.flooded = False
        self.log: list[str] = []

    # -- capabilities ---------------------------------------------------

    def known_avts(self):
        return [p for p in self.world.pairs if p.vault_txid in self.adv.transactions]

    def known_p2rws(self):
        return [p for p in self.world.pairs if compute_txid(p.p2rw) in self.adv.transactions]

    def can_sign_active(self) -> bool:
        return self.adv.can_sign(self.world.active_script())

    def can_sign_recovery(self) -> bool:
        return self.adv.can_sign(self.world.recovery_script())

    def silenced(self) -> bool:
        return all(n.compromised_by_adversary for n in self.world.watchtowers)

    def silence(self) -> None:
        for node in self.world.watchtowers:
            if node.compromised_by_adversary:
                node.compromised = True

    # -- transaction helpers --------------------------------------------

    def submit_private(self, tx: Transaction):
        res = self.world.chain.submit(tx, Visibility.MINER_PRIVATE, bribe=self.world.feerates.bribe)
        self.log.append(f"private {compute_txid(tx).hex()[:16]} {res.reason or 'accepted'}")
        return res

    def submit_public(self, tx: Transaction):
        res = self.world.broadcast(tx)
        self.log.append(f"public {compute_txid(tx).hex()[:16]} {res.reason or 'accepted'}")
        return res

    def _plain_theft(self, op: OutPoint, amount: int, script: Script, fee: int = 0) -> Transaction | None:
        groups = multisig_groups(script)
        if len(groups) != 1 or not self.adv.can_sign(script) or amount - fee <= 0:
            return None
        tx = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(op, 0)], [TxOutput(amount - fee, self.script)])
        sigs = self.adv.sign_multisig(tx, 0, script, amount)
        return tx.with_witness(0, cv.witness(sigs, [], script))

    def _active_theft(self, source: Transaction, template, fee: int = 0) -> Transaction | None:
        script = template.vault_script
        if not self.adv.can_sign(script, group=0):
            return None
        amount = source.outputs[0].amount
        tx = cv.build_active_spend(compute_txid(source), template, amount, self.script, fee)
        sigs = self.adv.sign_multisig(tx, 0, script, amount, group=0)
        return cv.finalize_active_spend(tx, template, sigs)

    def loot(self) -> None:
        """Steal every visible output locked by a plain multisig the adversary can sign."""
        chain = self.world.chain
        candidates = [(op, c.amount, c.script) for op, c in chain.utxo.items()]
        for txid in chain.public_mempool():
            tx = chain.mempool[txid].tx
            candidates += [(OutPoint(txid, i), o.amount, o.script) for i, o in enumerate(tx.outputs)]
        for op, amount, script in sorted(candidates, key=lambda c: c[0]):
            if op in self.stolen or script.to_bytes() in self.world.attacker_scripts:
                continue
            spender = chain.spender_of(op)
            if spender is not None and chain.in_mempool(spender, Visibility.MINER_PRIVATE):
                continue
            tx = self._plain_theft(op, amount, script)
            if tx is not None and self.submit_private(tx):
                self.stolen.add(op)

    # -- hooks ------------------------------------------------------------

    def start(self) -> None:
        s = self.strategy
        if s in ("avt_flood_silent", "full_silent", "silent_drain", "deposit_theft"):
            self.silence()
        if s in ("avt_flood", "avt_flood_silent", "full", "full_silent", "silent_drain"):
            self.flood(with_p2rw=s in ("full", "full_silent"))
        if s == "fake_unvault":
            self.fake_alerts()
        if s in ("deposit_theft", "deposit_race"):
            self.steal_deposits(private=s == "deposit_theft")
        if s == "payment_attack":
            payees = self.world.payee_scripts
            self.world.interface_tamper = lambda script: self.script if script.to_bytes() in payees else script
        if s == "unvault_steal" and self.target is None:
            self.target = self.rng.randrange(len(self.schedule)) if self.schedule else 0
        self.loot_if_allowed()

    def loot_if_allowed(self) -> None:
        if self.strategy != "passive":
            self.loot()

    def flood(self, with_p2rw: bool = False) -> None:
        self.flooded = True
        for pair in self.known_avts():
            if self.world.pair_state(pair) == "deposit":
                self.submit_public(pair.avt)
                self.pending_active[pair.vault_txid] = (pair, pair.avt, pair.template)
        if with_p2rw:
            for pair in self.known_p2rws():
                self.submit_public(pair.p2rw)

    def fake_alerts(self) -> None:
        """Forged un-vault alerts through compromised watchtowers or channels."""
        world = self.world
        senders = [n for n in world.watchtowers
                   if n.compromised_by_adversary or n.node_id in self.adv.channel_control]
        if not senders:
            return
        node = senders[0]
        for pair in world.pairs:
            alert = Alert(world.chain.height, node.node_id, "unauthorized-unvault", pair.vault_txid)
            world._alerts.append(alert)
            self.log.append(f"forged alert {pair.vault_txid.hex()[:16]}")
        world.settle()

    def steal_deposits(self, private: bool) -> None:
        for pair in self.world.pairs:
            if self.world.pair_state(pair) != "deposit":
                continue
            tx = self._plain_theft(pair.deposit_outpoint, pair.amount, pair.template.deposit_script)
            if tx is None:
                continue
            if not private:
                fee = cv.fee_for(tx, self.world.feerates.attacker)
                tx = self._plain_theft(pair.deposit_outpoint, pair.amount, pair.template.deposit_script, fee)
            if private:
                self.submit_private(tx)
            else:
                self.submit_public(tx)

    def on_event(self, event) -> None:
        if event.kind != "mempool" or event.tx is None:
            return
        pair = self.world.pair_for_vault_txid(event.txid)
        if pair is None or event.txid != pair.vault_txid:
            return
        if event.txid in self.seen_avts:
            return
        self.seen_avts.append(event.txid)
        owner_broadcast = event.txid in self.world.owner.authorized
        s = self.strategy
        if s == "p2rw_snipe" and compute_txid(pair.p2rw) in self.adv.transactions:
            self.submit_public(pair.p2rw)
        elif s == "unvault_steal" and owner_broadcast and not self.struck:
            if len([t for t in self.seen_avts if t in self.world.owner.authorized]) - 1 == self.target:
                self.struck = True
                self.pending_active[pair.vault_txid] = (pair, pair.avt, pair.template)
        elif s == "max_profit" and owner_broadcast and not self.struck and pair.index == self.target:
            self.struck = True
            self.pending_active[pair.vault_txid] = (pair, pair.avt, pair.template)
        self.loot_if_allowed()

    def on_block(self, height: int) -> None:
        chain, tp = self.world.chain, self.world.topology
        for vault_txid, (pair, source, template) in sorted(self.pending_active.items()):
            op = OutPoint(vault_txid, 0)
            if op in self.stolen or not chain.is_mined(vault_txid) or chain.spender_of(op) is not None:
                continue
            if chain.confirmations(vault_txid) < tp.T:
                continue
            tx = self._active_theft(source, template)
            if tx is not None and self.submit_private(tx):
                self.stolen.add(op)
        if self.strategy == "max_profit" and self.struck and not self.flooded:
            struck = [OutPoint(t, 0) for t in self.pending_active if OutPoint(t, 0) in self.stolen]
            if struck and chain.is_mined(chain.spender_of(struck[0]) or b""):
                # theft is public knowledge now: overwhelm the recovery process
                self.flood()
        self.loot_if_allowed()


def strategies_for(cs: CompromiseSet, tp: WalletTopology, mechanism: str = DELETED_KEY) -> list[str]:
    out = ["passive", "loot"]
    recovery = cs.recovery >= tp.m
    active = cs.active >= tp.j
    wt_all = cs.watchtowers >= tp.W
    p2rw = cs.p2rw_storage or cs.watchtowers > 0
    if recovery:
        out.append("wait_recovery")
    if p2rw:
        out.append("p2rw_snipe")
    if cs.avt_storage:
        out.append("avt_flood")
        if wt_all:
            out.append("avt_flood_silent")
        if p2rw:
            out.append("full")
            if wt_all:
                out.append("full_silent")
    if cs.watchtowers or cs.channels:
        out.append("fake_unvault")
    if active:
        out.append("unvault_steal")
        if cs.avt_storage:
            out.append("max_profit")
            if wt_all:
                out.append("silent_drain")
    if mechanism == DELETED_KEY and cs.vault_keys >= tp.p:
        out.append("deposit_race")
        out.append("deposit_theft")
    if cs.human_check:
        out.append("payment_attack")
    return out


# -- scenarios -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    sid: str
    title: str
    expected: OutcomeClass
    build: object            # topology -> CompromiseSet
    recovery_trigger: bool = False

    def compromise(self, tp: WalletTopology) -> CompromiseSet:
        return self.build(tp)


def _cs(**kw):
    return lambda tp: CompromiseSet(**{k: (v(tp) if callable(v) else v) for k, v in kw.items()})


_m = lambda tp: tp.m  # noqa: E731
_j = lambda tp: tp.j  # noqa: E731
_p = lambda tp: tp.p  # noqa: E731
_a = lambda tp: tp.a  # noqa: E731
_W = lambda tp: tp.W  # noqa: E731

CAT, LIM, NO = OutcomeClass.CATASTROPHIC, OutcomeClass.LIMITED_LOSS, OutcomeClass.NO_LOSS

SCENARIOS: dict[str, Scenario] = {s.sid: s for s in [
    Scenario("C1", "recovery wallet", CAT, _cs(recovery=_m), recovery_trigger=True),
    Scenario("C2", "recovery wallet + P2RW storage", CAT, _cs(recovery=_m, p2rw_storage=True)),
    Scenario("C3", "recovery wallet + AVT storage", CAT, _cs(recovery=_m, avt_storage=True)),
    Scenario("C4", "recovery wallet + AVT + P2RW storage", CAT,
             _cs(recovery=_m, avt_storage=True, p2rw_storage=True)),
    Scenario("C5", "recovery wallet + watchtower", CAT, _cs(recovery=_m, watchtowers=_W)),
    Scenario("C6", "active wallet + AVT storage + watchtower", CAT,
             _cs(active=_j, avt_storage=True, watchtowers=_W)),
    Scenario("C7", "ephemeral vault keys", CAT, _cs(vault_keys=_p)),
    Scenario("C8", "ephemeral vault keys + watchtower", CAT, _cs(vault_keys=_p, watchtowers=_W)),
    Scenario("L1", "AVT storage", NO, _cs(avt_storage=True)),
    Scenario("L2", "active wallet", LIM, _cs(active=_j)),
    Scenario("L3", "active wallet + watchtower", LIM, _cs(active=_j, watchtowers=_W)),
    Scenario("L4", "active wallet + AVT storage", LIM, _cs(active=_j, avt_storage=True)),
    Scenario("L5", "watchtower + AVT storage", NO, _cs(watchtowers=_W, avt_storage=True)),
    Scenario("L6", "P2RW storage", NO, _cs(p2rw_storage=True)),
    Scenario("L7", "watchtower", NO, _cs(watchtowers=_W)),
    Scenario("L8", "watchtower + P2RW storage", NO, _cs(watchtowers=_W, p2rw_storage=True)),
    Scenario("L9", "human-check channels", LIM, _cs(human_check=True)),
    Scenario("L10", "fee wallet", LIM, _cs(fee=_a)),
]}


@dataclass
class ScenarioOutcome:
    scenario: str
    outcome: OutcomeClass
    attacker_gain: int
    owner_retained: int
    frozen: int
    fees: int
    initial: int
    privacy_lost: bool
    strategy: str
    narrative: list = field(default_factory=list)
    max_partition: int = 0
    in_flight_cap: int = 0
    owner_custody: int = 0
    at_risk: int = 0
    world: object = field(default=None, repr=False, compare=False)

    @property
    def loss(self) -> int:
        return self.attacker_gain + self.frozen

    @property
    def conserved(self) -> bool:
        return self.attacker_gain + self.owner_retained + self.frozen + self.fees == self.initial

    def record(self) -> dict:
        return {"scenario": self.scenario, "class": self.outcome.value, "attacker_gain": self.attacker_gain,
                "owner_retained": self.owner_retained, "frozen": self.frozen, "fees": self.fees,
                "initial": self.initial, "privacy_lost": self.privacy_lost, "strategy": self.strategy}

    def line(self) -> str:
        return (f"{self.scenario} {self.outcome.value} gain={self.attacker_gain} frozen={self.frozen} "
                f"retained={self.owner_retained} fees={self.fees} strategy={self.strategy}")


def classify(world: World, at_risk: int) -> tuple[OutcomeClass, dict]:
    dist = world.distribution()
    loss = dist["attacker"] + dist["frozen"]
    if loss == 0:
        return OutcomeClass.NO_LOSS, dist
    if dist["owner_custody"] == 0 and at_risk > 0:
        return OutcomeClass.CATASTROPHIC, dist
    return OutcomeClass.LIMITED_LOSS, dist


@dataclass
class RunOptions:
    topology: WalletTopology = field(default_factory=WalletTopology)
    policy: UnvaultPolicy = field(default_factory=UnvaultPolicy)
    mechanism: str = DELETED_KEY
    revault_layers: int = 1
    partitions: tuple = DEFAULT_PARTITIONS
    schedule: tuple = DEFAULT_SCHEDULE
    feerates: Feerates = field(default_factory=Feerates)
    seed: int = 0
    watchtower_variant: Variant = Variant.RESPONDER
    suspects_recovery: bool = False
    freeze_on_recovery_breach: bool = True
    vigilant: bool = True
    fee_budget: int = FEE_BUDGET
    dead_watchtowers: int | tuple = 0   # a count (first nodes) or explicit indices


def _run_once(cs: CompromiseSet, strategy: str, opts: RunOptions, recovery_trigger: bool,
              schedule_extra=(), target: int | None = None) -> tuple[World, Attacker]:
    world = World(opts.topology, opts.seed, opts.mechanism, opts.policy, opts.feerates, opts.watchtower_variant,
                  opts.revault_layers, suspects_recovery=opts.suspects_recovery,
                  freeze_on_recovery_breach=opts.freeze_on_recovery_breach, vigilant=opts.vigilant)
    dead = opts.dead_watchtowers
    for i in (range(dead) if isinstance(dead, int) else dead):
        world.watchtowers[i].alive = False
    # ephemeral keys leak only if the devices are compromised before deletion
    early = CompromiseSet(vault_keys=cs.vault_keys)
    late = cs.without_vault_keys()
    pending = sorted(schedule_extra, key=lambda e: e[0])
    if not early.empty:
        apply_compromise(world, early)

    def on_tick(now: int) -> None:
        while pending and 0 <= pending[0][0] <= now:
            apply_compromise(world, pending.pop(0)[1])

    world.tick_hooks.append(on_tick)
    bootstrap(world, list(opts.partitions), opts.fee_budget)
    world.tick_hooks.remove(on_tick)
    for _, extra in pending:
        late = late.union(extra)
    apply_compromise(world, late)
    attacker = Attacker(world, cs, strategy, random.Random(f"attacker/{opts.seed}"), opts.schedule, target)
    world.observers.append(attacker)
    attacker.start()
    world.settle()
    if recovery_trigger:
        run_recovery(world, RecoveryKind.FULL)
    for index in opts.schedule:
        if world.owner.halted or world.owner.frozen or index >= len(world.pairs):
            break
        pair = world.pairs[index]
        if world.pair_state(pair) != "deposit":
            continue
        run_unvault(world, pair.vault_txid)
        world.mine()
    world.mine(opts.topology.T + 2)
    return world, attacker


def _at_risk(world: World) -> int:
    return sum(p.vault_amount for p in world.pairs)


def evaluate(cs: CompromiseSet, opts: RunOptions | None = None, recovery_trigger: bool = False,
             scenario: str = "custom", strategies=None, schedule_extra=()) -> ScenarioOutcome:
    """Best attacker play (largest loss) over every strategy the compromise allows."""
    opts = opts or RunOptions()
    cs.validate(opts.topology)
    full = cs
    for _, extra in schedule_extra:
        extra.validate(opts.topology)
        full = full.union(extra)
    names = strategies or strategies_for(full, opts.topology, opts.mechanism)
    best = None
    for name in names:
        targets = [None]
        if name == "max_profit":
            targets = list(range(len(opts.partitions)))
        for target in targets:
            world, attacker = _run_once(cs, name, opts, recovery_trigger, schedule_extra, target)
            cls, dist = classify(world, _at_risk(world))
            label = name if target is None else f"{name}:{target}"
            outcome = ScenarioOutcome(
                scenario, cls, dist["attacker"], dist["owner"], dist["frozen"], dist["fees"], dist["initial"],
                privacy_lost=world.fleet.adversary.size() > 0 or bool(world.owner.privacy_events),
                strategy=label,
                narrative=[line for t in world.traces for line in t.lines()] + attacker.log,
                max_partition=max(p.vault_amount for p in world.pairs) if world.pairs else 0,
                in_flight_cap=_in_flight_cap(world), owner_custody=dist["owner_custody"], at_risk=_at_risk(world),
                world=world)
            if best is None or (outcome.loss, outcome.outcome.rank) > (best.loss, best.outcome.rank):
                best = outcome
    return best


def _in_flight_cap(world: World) -> int:
    amounts = sorted((p.vault_amount for p in world.pairs), reverse=True)
    return sum(amounts[:world.policy.max_unvaults_in_flight])


def run_scenario(sid: str, opts: RunOptions | None = None) -> ScenarioOutcome:
    if sid not in SCENARIOS:
        raise KeyError(f"unknown scenario {sid!r}")
    opts = opts or RunOptions()
    sc = SCENARIOS[sid]
    return evaluate(sc.compromise(opts.topology), opts, sc.recovery_trigger, sid)


def run_matrix(opts: RunOptions | None = None, ids=None) -> list[ScenarioOutcome]:
    return [run_scenario(sid, opts) for sid in (ids or SCENARIOS)]


def not_applicable(mechanism: str) -> set[str]:
    # no ephemeral keys exist under CTV, so the key-leak scenarios have nothing to attack
    return {"C7", "C8"} if mechanism == CTV else set()


def matrix_table(rows: list[tuple[str, ScenarioOutcome]], skip=()) -> str:
    """``scenario topology class attacker_gain expected flag`` lines."""
    out = ["scenario topology class attacker_gain expected match"]
    for label, o in rows:
        exp = SCENARIOS[o.scenario].expected.value if o.scenario in SCENARIOS else "-"
        if o.scenario in skip:
            exp = "n/a"
        flag = "ok" if exp in ("-", "n/a", o.outcome.value) else "DIVERGES"
        out.append(f"{o.scenario} {label} {o.outcome.value} {o.attacker_gain} {exp} {flag}")
    return "\n".join(out) + "\n"


def topology_label(tp: WalletTopology) -> str:
    return (f"j{tp.j}k{tp.k}-m{tp.m}n{tp.n}-p{tp.p}t{tp.t}-a{tp.a}b{tp.b}"
            f"-R{tp.R}S{tp.S}W{tp.W}T{tp.T}")


# -- fee race ------------------------------------------------------------------------------


def race(owner_feerate: int, attacker_feerate: int, attacker_private: bool, bribe: int = 0,
         seed: int = 0) -> str:
    """Which of two conflicting spends of one coin gets mined: "owner" or "attacker"."""
    rng = random.Random(f"race/{seed}")
    shared = KeyPair(rng.randbytes(32), "shared")
    script = multisig_script(1, [shared.public])
    chain = Chain(miner_bribe=bribe)
    op = chain.fund(script, 1_000_000)

    def spend(feerate: int, tag: bytes) -> Transaction:
        dest = multisig_script(1, [KeyPair(rng.randbytes(32), tag.decode()).public])
        fee = 0
        for _ in range(4):  # settle the fee against the final size
            tx = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(op, 0)],
                             [TxOutput(1_000_000 - fee, dest)])
            tx = tx.with_witness(0, cv.witness([sign_input(shared, tx, 0, script, 1_000_000)], [], script))
            fee = feerate * tx.vsize()
        return tx

    owner_tx = spend(owner_feerate, b"owner")
    attacker_tx = spend(attacker_feerate, b"attacker")
    chain.submit(owner_tx, Visibility.PUBLIC)
    chain.submit(attacker_tx, Visibility.MINER_PRIVATE if attacker_private else Visibility.PUBLIC,
                 bribe=bribe if attacker_private else 0)
    mined = chain.mine_block()
    if compute_txid(owner_tx) in mined:
        return "owner"
    if compute_txid(attacker_tx) in mined:
        return "attacker"
    return "none"


# -- tolerance oracle --------------------------------------------------------------------------


@dataclass(frozen=True)
class ToleranceRow:
    functionality: str
    parameters: str
    loss_tolerance: int | None
    leak_tolerance: int | None
    expected_loss: int | None
    expected_leak: int | None

    @property
    def matches(self) -> bool:
        return self.loss_tolerance == self.expected_loss and self.leak_tolerance == self.expected_leak

    def line(self) -> str:
        def f(v):
            return "-" if v is None else str(v)
        return (f"{self.functionality} {self.parameters} loss={f(self.loss_tolerance)} "
                f"leak={f(self.leak_tolerance)} expected_loss={f(self.expected_loss)} "
                f"expected_leak={f(self.expected_leak)} {'ok' if self.matches else 'DIVERGES'}")


@dataclass
class ToleranceTable:
    rows: list

    def row(self, name: str) -> ToleranceRow:
        return next(r for r in self.rows if r.functionality == name)

    @property
    def matches(self) -> bool:
        return all(r.matches for r in self.rows)

    def text(self) -> str:
        return "".join(r.line() + "\n" for r in self.rows)


def _max_tolerated(members, ok) -> tuple[int, int]:
    """Largest s such that ``ok(subset)`` holds for every subset of size <= s; and cases tried."""
    tolerated, cases = -1, 0
    for size in range(len(members) + 1):
        results = []
        for subset in itertools.combinations(members, size):
            cases += 1
            results.append(ok(frozenset(subset)))
        if not all(results):
            break
        tolerated = size
    return tolerated, cases


def tolerance_oracle(topology: WalletTopology | None = None, seed: int = 0) -> ToleranceTable:
    tp = topology or WalletTopology()
    for name in ("k", "n", "t", "b", "R", "S", "W"):
        if getattr(tp, name) > BRUTE_FORCE_BOUND:
            raise BoundError(f"{name}={getattr(tp, name)} exceeds brute-force bound {BRUTE_FORCE_BOUND}")
    world = World(tp, seed)
    bootstrap(world, [1_000_000], fee_budget=10_000)
    pair = world.pairs[0]
    fleet = world.fleet
    rows = []
    cases = 0

    def wallet_rows(label: str, role: Role, script: Script, coin_amount: int, expect_loss, expect_leak):
        nonlocal cases
        hms = fleet.by_role(role)
        publics = [hm.derive_wallet_keys(role.value, 1, 0)[0] for hm in hms]
        op = OutPoint(b"\x42" * 32, 0)
        tx = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(op, 0)],
                         [TxOutput(coin_amount - 1000, world.payee)])

        def spend_with(keys) -> bool:
            threshold, order = multisig_groups(script)[-1]
            usable = [k for k in keys if k.public in order]
            usable.sort(key=lambda k: order.index(k.public))
            usable = usable[:threshold]
            sigs = [sign_input(k, tx, 0, script, coin_amount) for k in usable]
            return bool(verify_input(tx.with_witness(0, cv.witness(sigs, [], script)), 0, script, coin_amount, 0))

        def honest(failed) -> bool:
            return spend_with([hm.key_for(pub) for hm, pub in zip(hms, publics) if hm.hm_id not in failed])

        def safe(leaked) -> bool:
            adv = AdversaryKnowledge()
            for hm, pub in zip(hms, publics):
                if hm.hm_id in leaked:
                    adv.learn_key(hm.key_for(pub))
            return not spend_with(list(adv.keys.values()))

        ids = [hm.hm_id for hm in hms]
        loss, c1 = _max_tolerated(ids, honest)
        leak, c2 = _max_tolerated(ids, safe)
        cases += c1 + c2
        rows.append(ToleranceRow(label, f"{multisig_groups(script)[-1][0]}-of-{len(ids)}", loss, leak,
                                 expect_loss, expect_leak))

    wallet_rows("recovery-wallet", Role.RECOVERY, world.recovery_script(), 1_000_000, tp.n - tp.m, tp.m - 1)
    wallet_rows("active-wallet", Role.ACTIVE, world.active_script(), 1_000_000, tp.k - tp.j, tp.j - 1)
    wallet_rows("fee-wallet", Role.FEE, world.fee_script(), 1_000_000, tp.b - tp.a, tp.a - 1)

    # ephemeral vault keys, as they exist between generation and deletion
    vault_hms = fleet.by_role(Role.VAULT)
    eph_rng = random.Random(f"oracle/{seed}")
    live = {hm.hm_id: KeyPair(eph_rng.randbytes(32), f"{hm.hm_id}:eph") for hm in vault_hms}
    dep_script = multisig_script(tp.p, [k.public for k in live.values()])

    def deposit_safe(leaked) -> bool:
        adv = AdversaryKnowledge()
        for hm_id in leaked:
            adv.learn_key(live[hm_id])
        return not adv.can_sign(dep_script)

    leak, c = _max_tolerated([hm.hm_id for hm in vault_hms], deposit_safe)
    cases += c
    rows.append(ToleranceRow("ephemeral-keys", f"{tp.p}-of-{tp.t}", None, leak, None, tp.p - 1))

    # AVT storage on R vault HMs
    holders = list(fleet.avt_holders[pair.vault_txid])

    def avt_available(failed) -> bool:
        saved = {h: fleet.hms[h].failed for h in holders}
        try:
            for h in failed:
                fleet.hms[h].failed = True
            fleet.fetch_act(pair.vault_txid)
            return True
        except (Lost, NotFound):
            return False
        finally:
            for h, v in saved.items():
                fleet.hms[h].failed = v

    def avt_secret(stolen) -> bool:
        adv = AdversaryKnowledge()
        for h in stolen:
            raw = fleet.hms[h].stored_acts.get(pair.vault_txid)
            if raw is not None:
                adv.learn_tx(Transaction.from_bytes(raw))
        return pair.vault_txid not in adv.transactions

    loss, c1 = _max_tolerated(holders, avt_available)
    theft, c2 = _max_tolerated(holders, avt_secret)
    cases += c1 + c2
    rows.append(ToleranceRow("avt-storage", f"R={len(holders)}", loss, theft, tp.R - 1, 0))

    devices = list(fleet.p2rw_holders[pair.vault_txid])

    def p2rw_available(failed) -> bool:
        saved = {d.hm_id: d.failed for d in devices}
        try:
            for d in devices:
                if d.hm_id in failed:
                    d.failed = True
            fleet.fetch_p2rw(pair.vault_txid)
            return True
        except Lost:
            return False
        finally:
            for d in devices:
                d.failed = saved[d.hm_id]

    def p2rw_secret(stolen) -> bool:
        return not any(d.hm_id in stolen for d in devices)

    ids = [d.hm_id for d in devices]
    loss, c1 = _max_tolerated(ids, p2rw_available)
    theft, c2 = _max_tolerated(ids, p2rw_secret)
    cases += c1 + c2
    rows.append(ToleranceRow("p2rw-storage", f"S={len(ids)}", loss, theft, tp.S - 1, 0))

    # watchtower: does an unauthorized un-vault still reach the owner with W nodes minus failures?
    def detected(failed) -> bool:
        probe = World(tp, seed, watchtower_variant=Variant.NOTIFICATION)
        bootstrap(probe, [1_000_000], fee_budget=0)
        for node in probe.watchtowers:
            node.alive = node.node_id not in failed
        probe.broadcast(probe.pairs[0].avt)
        return any(a.kind == "unauthorized-unvault" for a in probe.owner.inbox)

    loss, c = _max_tolerated([f"wt-{i}" for i in range(tp.W)], detected)
    cases += c
    rows.append(ToleranceRow("watchtower", f"W={tp.W}", loss, None, tp.W - 1, None))

    # human check: secure while at least one of in-band / out-of-band channels holds
    def human_secure(broken) -> bool:
        state = ChannelState("in-band" in broken, "oob" in broken)
        return not human_check(state, Payload(b"intended", b"tampered"))

    leak, c = _max_tolerated(["in-band", "oob"], human_secure)
    cases += c
    rows.append(ToleranceRow("human-check", "2 channels", None, leak, None, 1))
    table = ToleranceTable(rows)
    table.cases = cases
    return table
