"""Scenario files and world construction.

A scenario is a TOML document (schema in ``docs/formats.md``).  Loading
validates it eagerly so a bad file fails before any trial runs.
"""

from __future__ import annotations

import copy
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacker import AttackerNode
from .enddevice import DeviceConfig, EndDevice
from .frames import DeviceSession, MicPolicy
from .netserver import Gateway, NetworkServer, NsConfig
from .phy import MAX_DR, RX2_FREQ, UPLINK_CHANNELS
from .simkit import SECOND, ChannelModel, Engine, Medium

SCHEMA_VERSION = 1
EXPERIMENTS = ("baseline", "adr_spoofing", "beacon_drift")
ROLES = ("enddevice", "gateway", "attacker")


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    experiment: str
    trials: int = 20
    base_seed: int = 1
    mic_policy: MicPolicy = MicPolicy.V11
    channel: dict = field(default_factory=dict)
    nodes: dict = field(default_factory=dict)
    links: list = field(default_factory=list)
    device: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    source: str = ""

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(doc, source=text)

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def builtin(cls, experiment: str) -> "Scenario":
        """One of the scenarios shipped with the package, by experiment name."""
        if experiment not in EXPERIMENTS:
            raise ScenarioError(f"no built-in scenario for {experiment!r}")
        return cls.from_text(resources.files("lwsim.scenarios").joinpath(f"{experiment}.toml").read_text())

    @classmethod
    def from_dict(cls, doc: dict, source: str = "") -> "Scenario":
        doc = copy.deepcopy(doc)
        version = doc.pop("version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario version {version}")
        try:
            policy = MicPolicy(doc.pop("mic_policy", "V11"))
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        known = {"name", "experiment", "trials", "base_seed", "channel", "nodes", "links", "device", "network", "attack", "baseline"}
        unknown = set(doc) - known
        if unknown:
            raise ScenarioError(f"unknown top-level keys: {sorted(unknown)}")
        scn = cls(mic_policy=policy, source=source, **{k: doc[k] for k in doc})
        scn.validate()
        return scn

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise ScenarioError(f"experiment must be one of {EXPERIMENTS}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ScenarioError("trials must be a positive integer")
        for name, node in self.nodes.items():
            if node.get("role") not in ROLES:
                raise ScenarioError(f"node {name!r} has unknown role {node.get('role')!r}")
        if len(self.nodes_with("enddevice")) != 1:
            raise ScenarioError("exactly one enddevice node is required")
        if not self.nodes_with("gateway"):
            raise ScenarioError("at least one gateway node is required")
        for link in self.links:
            for end in ("a", "b"):
                if link.get(end) not in self.nodes:
                    raise ScenarioError(f"link references unknown node {link.get(end)!r}")
            att = link.get("attenuation_db")
            if not isinstance(att, (int, float)) or att < 0:
                raise ScenarioError(f"link {link['a']}-{link['b']} needs attenuation_db >= 0")
        dr = self.device.get("initial_dr", 0)
        if not 0 <= dr <= MAX_DR:
            raise ScenarioError("device.initial_dr out of range")
        if self.experiment != "baseline":
            kind = self.attack.get("type")
            if kind != self.experiment:
                raise ScenarioError(f"attack.type must be {self.experiment!r}")
            roles = ("entry", "exit") if kind == "adr_spoofing" else ("node",)
            for role in roles:
                ref = self.attack.get(role)
                if ref not in self.nodes or self.nodes[ref].get("role") != "attacker":
                    raise ScenarioError(f"attack.{role} must name an attacker node")
            if kind == "adr_spoofing":
                if self.attack["entry"] == self.attack["exit"]:
                    raise ScenarioError("entry and exit must be distinct")
                for cell in self.attack.get("cells", []):
                    if cell.get("wormhole") not in ("rx2", "downlink_delayed"):
                        raise ScenarioError(f"bad wormhole in cell {cell}")
                    if not 0 <= cell.get("datarate", -1) <= MAX_DR:
                        raise ScenarioError(f"bad datarate in cell {cell}")
            else:
                steps = self.attack.get("steps", [])
                if not steps or any(not isinstance(s, int) or s < 1 for s in steps):
                    raise ScenarioError("attack.steps must list positive integers")

    def nodes_with(self, role: str) -> list[str]:
        return [n for n, node in self.nodes.items() if node.get("role") == role]

    def trial_seed(self, index: int) -> int:
        return self.base_seed + index

    def replace(self, **changes) -> "Scenario":
        new = copy.deepcopy(self)
        for key, value in changes.items():
            if key == "mic_policy":
                value = MicPolicy(value)
            setattr(new, key, value)
        new.validate()
        return new

    @property
    def channels(self) -> tuple:
        return tuple(self.channel.get("plan_hz", UPLINK_CHANNELS))

    def device_config(self, **overrides) -> DeviceConfig:
        d = self.device
        n = self.network
        dev_addr = d.get("dev_addr", 0x26011BDA)
        if isinstance(dev_addr, str):
            dev_addr = int(dev_addr, 16)
        app = d.get("app_payload_bytes", 1)
        cfg = dict(
            dev_addr=dev_addr,
            uplink_interval=int(d.get("uplink_interval_s", 12) * SECOND),
            app_payload_len=None if app is False or app < 0 else app,
            adr_ack_limit=d.get("adr_ack_limit", 64),
            adr_ack_delay=d.get("adr_ack_delay", 32),
            initial_dr=d.get("initial_dr", 0),
            initial_tp_index=d.get("tx_power_index", 0),
            channels=self.channels,
            d_rx1=int(n.get("d_rx1_s", 1) * SECOND),
            rx2_freq=n.get("rx2_freq_hz", RX2_FREQ),
            rx2_dr=n.get("rx2_dr", 0),
            mic_policy=self.mic_policy,
            window_guard_symbols=d.get("window_guard_symbols", 3.0),
            ping_slot_guard_symbols=d.get("ping_slot_guard_symbols", 9.0),
            widen_rate=d.get("widen_rate_symbols", 1.0),
            max_guard_symbols=d.get("max_guard_symbols", 32.0),
            ping_period_s=d.get("ping_period_s", 128),
            adr=d.get("adr", True),
        )
        cfg.update(overrides)
        return DeviceConfig(**cfg)

    def ns_config(self, **overrides) -> NsConfig:
        n = self.network
        cfg = dict(
            mic_policy=self.mic_policy,
            margin_db=n.get("margin_db", 10.0),
            d_rx1=int(n.get("d_rx1_s", 1) * SECOND),
            rx2_freq=n.get("rx2_freq_hz", RX2_FREQ),
            rx2_dr=n.get("rx2_dr", 0),
            resend_budget=n.get("resend_budget", 8),
        )
        cfg.update(overrides)
        return NsConfig(**cfg)


@dataclass
class World:
    engine: Engine
    medium: Medium
    ns: NetworkServer
    device: EndDevice
    gateways: list
    attackers: dict


def build_world(scn: Scenario, seed: int, device_overrides: dict | None = None, ns_overrides: dict | None = None, tracing: bool = False) -> World:
    """Instantiate every node of the scenario on a fresh engine."""
    engine = Engine(seed, tracing=tracing)
    ch = scn.channel
    model = ChannelModel(
        noise_floor_dbm=ch.get("noise_floor_dbm", -117.0),
        snr_jitter_sigma_db=ch.get("snr_jitter_sigma_db", 1.0),
    )
    for link in scn.links:
        model.set_link(link["a"], link["b"], float(link["attenuation_db"]))
    medium = Medium(engine, model)
    ns = NetworkServer(engine, scn.ns_config(**(ns_overrides or {})))
    device = None
    gateways, attackers = [], {}
    for name, node in scn.nodes.items():
        role = node["role"]
        if role == "enddevice":
            cfg = scn.device_config(**(device_overrides or {}))
            device = EndDevice(name, cfg, DeviceSession.abp(cfg.dev_addr), rng=engine.rng("device"))
            medium.add(device)
        elif role == "gateway":
            gw = Gateway(name, node.get("power_dbm", 20.0), node.get("gw_info", "GW").encode())
            medium.add(gw)
            ns.add_gateway(gw)
            gateways.append(gw)
        else:
            attackers[name] = medium.add(AttackerNode(name, node.get("power_dbm", 14.0)))
    cfg = device.config
    ns.register(
        DeviceSession.abp(cfg.dev_addr),
        dr=cfg.initial_dr,
        tp_index=cfg.initial_tp_index,
        class_b=cfg.class_b,
    )
    return World(engine, medium, ns, device, gateways, attackers)
