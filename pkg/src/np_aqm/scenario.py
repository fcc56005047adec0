"""Scenario files: sectioned ``key = value`` text plus ``CAPSULE`` lines.

Grammar (one statement per line; ``#`` starts a comment)::

    seed = 1                      # keys before any header belong to the top level
    [traffic]
    flow_count = 64
    CAPSULE SetFlowPriority at=1000000 flow=3 level=PRIV

Unknown sections or keys and out-of-range values raise `ConfigError`.
Every key left out takes its default; `dumps` writes every key, so
``loads(dumps(s)) == s``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from np_aqm.classifier import DEFAULT_CLASS_TO_PORT, N_EGRESS_PORTS, RoutingPolicy, parse_capsule
from np_aqm.core import TrafficClass
from np_aqm.traffic import ConfigError, PacketKind, SizeModel, TrafficConfig

POLICIES = ("droptail", "red", "anaqm")


@dataclass(frozen=True)
class RedParams:
    w_q: float = 0.002
    max_p: float = 0.10
    min_th: float = 0.25
    max_th: float = 0.75


@dataclass(frozen=True)
class Scenario:
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    policies: tuple = ("anaqm", "red")
    port_rates_bps: tuple = (155_000_000,) * N_EGRESS_PORTS
    tbuf_elems: int = 128
    soft_threshold: float = 0.85
    deferred_capacity: int = 512
    feedback_every: int = 16
    contexts: int = 8
    rbuf_elems: int = 128
    ring_capacity: int = 128
    rx_service_ns: int = 50
    classify_service_ns: int = 50
    refresh_interval_ns: int = 50_000_000
    max_flows: int = 65_536
    node_id: str = "np0"
    class_to_port: tuple = tuple(sorted((c.name, p) for c, p in DEFAULT_CLASS_TO_PORT.items()))
    red: RedParams = field(default_factory=RedParams)
    capsules: tuple = ()
    out_dir: str = "out"
    event_log: bool = False
    snapshot_interval_ms: int = 0
    tail_window_ns: int = 40_000_000

    @property
    def seed(self) -> int:
        return self.traffic.seed

    @property
    def duration_ns(self) -> int:
        return self.traffic.duration_ns

    def routing(self) -> RoutingPolicy:
        return RoutingPolicy({TrafficClass[c]: tuple(p) for c, p in self.class_to_port},
                             n_ports=len(self.port_rates_bps))

    def with_policies(self, *names: str) -> "Scenario":
        return dataclasses.replace(self, policies=tuple(names))

    def config_hash(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]

    def validate(self) -> None:
        self.traffic.validate()
        for name in self.policies:
            if name not in POLICIES:
                raise ConfigError("policy", f"unknown policy {name!r}; choose from {POLICIES}")
        if not self.policies:
            raise ConfigError("policy", "at least one policy required")
        if len(self.port_rates_bps) != N_EGRESS_PORTS or any(r <= 0 for r in self.port_rates_bps):
            raise ConfigError("ports.rate_bps", f"need {N_EGRESS_PORTS} positive rates")
        _check("ports.tbuf_elems", self.tbuf_elems >= 1, "must be >= 1")
        _check("ports.soft_threshold", 0 < self.soft_threshold <= 1, "range (0, 1]")
        _check("ports.deferred_capacity", self.deferred_capacity >= 0, "must be >= 0")
        _check("ports.feedback_every", self.feedback_every >= 1, "must be >= 1")
        _check("pipeline.contexts", self.contexts >= 1, "must be >= 1")
        _check("pipeline.rbuf_elems", self.rbuf_elems >= 1, "must be >= 1")
        _check("pipeline.ring_capacity", self.ring_capacity >= 1, "must be >= 1")
        _check("pipeline.rx_service_ns", self.rx_service_ns >= 0, "must be >= 0")
        _check("pipeline.classify_service_ns", self.classify_service_ns >= 0, "must be >= 0")
        _check("classifier.refresh_interval_ns", self.refresh_interval_ns >= 1, "must be >= 1")
        _check("classifier.max_entries", self.max_flows >= 1, "must be >= 1")
        _check("red.w_q", 0 < self.red.w_q <= 1, "range (0, 1]")
        _check("red.max_p", 0 < self.red.max_p <= 1, "range (0, 1]")
        _check("red.min_th", 0 <= self.red.min_th < self.red.max_th, "need 0 <= min_th < max_th")
        _check("red.max_th", self.red.max_th <= 1, "fraction of capacity, at most 1")
        _check("output.snapshot_interval_ms", self.snapshot_interval_ms >= 0, "must be >= 0")
        _check("output.tail_window_ns", self.tail_window_ns >= 1, "must be >= 1")
        self.routing().validate()
        for at, d in self.capsules:
            _check("CAPSULE", at >= 0, "at= must be >= 0")
            if "flow" in d.args:
                try:
                    idx = int(d.args["flow"])
                except ValueError:
                    raise ConfigError("CAPSULE", f"flow={d.args['flow']!r} is not an index")
                _check("CAPSULE", 0 <= idx < self.traffic.flow_count, "flow index out of range")


def _check(key: str, ok: bool, msg: str) -> None:
    if not ok:
        raise ConfigError(key, msg)


# ---- value codecs -----------------------------------------------------------

def _int(s: str) -> int:
    return int(s.replace("_", ""))


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(_int(x) for x in s.split(",") if x.strip())


def _mix(s: str) -> tuple:
    out = []
    for part in s.split(","):
        name, _, w = part.strip().partition(":")
        out.append((PacketKind[name.strip()], float(w) if w else 1.0))
    return tuple(out)


def _fmt_mix(mix) -> str:
    return ", ".join(f"{k.value}:{w:g}" for k, w in mix)


def _names(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _join(xs) -> str:
    return ", ".join(str(x) for x in xs)


# (section, key) -> (path, parser, formatter); path is the attribute chain
_FIELDS: dict[tuple[str, str], tuple[tuple[str, ...], Callable, Callable]] = {
    ("", "seed"): (("traffic", "seed"), _int, str),
    ("", "duration_ns"): (("traffic", "duration_ns"), _int, str),
    ("", "policy"): (("policies",), _names, _join),
    ("traffic", "aggregate_rate_bps"): (("traffic", "aggregate_rate_bps"), _int, str),
    ("traffic", "inter_packet_gap_ns"): (("traffic", "inter_packet_gap_ns"), _int, str),
    ("traffic", "flow_count"): (("traffic", "flow_count"), _int, str),
    ("traffic", "start_window_ns"): (("traffic", "start_window_ns"), _int, str),
    ("traffic", "mix"): (("traffic", "mix"), _mix, _fmt_mix),
    ("traffic", "size"): (("traffic", "size_model"), SizeModel.parse, str),
    ("traffic", "ingress"): (("traffic", "ingress"), str, str),
    ("traffic", "small_ttl_max"): (("traffic", "small_ttl_max"), _int, str),
    ("traffic", "large_ttl_min"): (("traffic", "large_ttl_min"), _int, str),
    ("traffic", "default_ttl"): (("traffic", "default_ttl"), _int, str),
    ("pipeline", "contexts"): (("contexts",), _int, str),
    ("pipeline", "rbuf_elems"): (("rbuf_elems",), _int, str),
    ("pipeline", "ring_capacity"): (("ring_capacity",), _int, str),
    ("pipeline", "rx_service_ns"): (("rx_service_ns",), _int, str),
    ("pipeline", "classify_service_ns"): (("classify_service_ns",), _int, str),
    ("ports", "rate_bps"): (("port_rates_bps",), _ints, _join),
    ("ports", "tbuf_elems"): (("tbuf_elems",), _int, str),
    ("ports", "soft_threshold"): (("soft_threshold",), float, repr),
    ("ports", "deferred_capacity"): (("deferred_capacity",), _int, str),
    ("ports", "feedback_every"): (("feedback_every",), _int, str),
    ("classifier", "refresh_interval_ns"): (("refresh_interval_ns",), _int, str),
    ("classifier", "max_entries"): (("max_flows",), _int, str),
    ("classifier", "node_id"): (("node_id",), str, str),
    ("red", "w_q"): (("red", "w_q"), float, repr),
    ("red", "max_p"): (("red", "max_p"), float, repr),
    ("red", "min_th"): (("red", "min_th"), float, repr),
    ("red", "max_th"): (("red", "max_th"), float, repr),
    ("output", "dir"): (("out_dir",), str, str),
    ("output", "event_log"): (("event_log",), _bool, lambda b: "true" if b else "false"),
    ("output", "snapshot_interval_ms"): (("snapshot_interval_ms",), _int, str),
    ("output", "tail_window_ns"): (("tail_window_ns",), _int, str),
}
for _c in TrafficClass:
    _FIELDS[("classifier", f"map.{_c.name}")] = (("class_to_port", _c.name), _ints, _join)

SECTIONS = ("", "traffic", "pipeline", "ports", "classifier", "red", "output")


def _get(s: Scenario, path):
    if path[0] == "class_to_port":
        return dict(s.class_to_port)[path[1]]
    obj = s
    for p in path:
        obj = getattr(obj, p)
    return obj


def loads(text: str) -> Scenario:
    section = ""
    top: dict[str, Any] = {}
    traffic: dict[str, Any] = {}
    red: dict[str, Any] = {}
    cmap = dict(Scenario().class_to_port)
    capsules = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS or section == "":
                raise ConfigError(f"[{section}]", f"line {lineno}: unknown section")
            continue
        if line.startswith("CAPSULE"):
            d = parse_capsule(line)
            try:
                at = _int(d.args.pop("at", "0"))
            except ValueError:
                raise ConfigError("CAPSULE", f"line {lineno}: at= must be an integer")
            capsules.append((at, d))
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        full = f"{section}.{key}" if section else key
        if not sep:
            raise ConfigError(full, f"line {lineno}: expected key = value")
        entry = _FIELDS.get((section, key))
        if entry is None:
            raise ConfigError(full, f"line {lineno}: unknown key")
        if (section, key) in seen:
            raise ConfigError(full, f"line {lineno}: duplicate key")
        seen.add((section, key))
        path, parse, _ = entry
        try:
            v = parse(value)
        except (ValueError, KeyError) as e:
            raise ConfigError(full, f"line {lineno}: cannot parse {value!r} ({e})")
        if path[0] == "traffic":
            traffic[path[1]] = v
        elif path[0] == "red":
            red[path[1]] = v
        elif path[0] == "class_to_port":
            cmap[path[1]] = v
        else:
            top[path[0]] = v
    if "port_rates_bps" in top and len(top["port_rates_bps"]) == 1:
        top["port_rates_bps"] = top["port_rates_bps"] * N_EGRESS_PORTS
    s = Scenario(traffic=TrafficConfig(**traffic), red=RedParams(**red),
                 class_to_port=tuple(sorted(cmap.items())), capsules=tuple(capsules), **top)
    s.validate()
    return s


def load_scenario(path) -> Scenario:
    return loads(Path(path).read_text())


def dumps(s: Scenario) -> str:
    lines = []
    for sec in SECTIONS:
        if sec:
            lines += ["", f"[{sec}]"]
        for (fsec, key), (path, _, fmt) in _FIELDS.items():
            if fsec == sec:
                lines.append(f"{key} = {fmt(_get(s, path))}")
    if s.capsules:
        lines.append("")
        for at, d in s.capsules:
            args = " ".join(f"{k}={v}" for k, v in d.args.items())
            lines.append(f"CAPSULE {d.kind} at={at} {args}".rstrip())
    return "\n".join(lines) + "\n"
