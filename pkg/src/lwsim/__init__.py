"""Deterministic discrete-event simulator of LoRaWAN Class A/B networks with an attacker layer.

Modules:
    phy         time-on-air, data-rate plan, reception resolution
    frames      MAC frame codec, MIC policies, beacon payload
    simkit      event engine, channel model, shared medium
    enddevice   Class A/B device state machines and ADR backoff
    netserver   network server, gateways, ADR decisions, beacons
    attacker    wormholes, ADR spoofing, beacon drifting
    scenario / experiments / report / cli   the experiment harness
"""

from .frames import MicPolicy
from .phy import time_on_air
from .scenario import Scenario, ScenarioError, build_world
from .simkit import SECOND, Engine

__version__ = "0.1.0"

__all__ = ["Engine", "MicPolicy", "SECOND", "Scenario", "ScenarioError", "build_world", "time_on_air", "__version__"]
