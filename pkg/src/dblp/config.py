"""Experiment configuration: INI files, shipped presets and validation."""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field, replace

from .clr import FixedTolerance, ToleranceSchedule
from .lossnet import DelayModel, LinkTiming, LossSchedule
from .wire import DEFAULT_MAX_PAYLOAD, MAX_DATAGRAM_BYTES, HEADER
from .workload import NormProfile

MODES = ("simulate", "server", "worker")


class ConfigError(ValueError):
    pass


@dataclass
class ToleranceConfig:
    policy: str = "adaptive"
    p: float = 0.008
    p_low: float = 0.008
    p_high: float = 0.408
    eta: float = 0.5
    freq: int = 10
    compare: str = "check"

    def validate(self, where: str) -> None:
        if self.policy == "fixed":
            if not 0.0 <= self.p < 1.0:
                raise ConfigError(f"{where}: p must lie in [0, 1)")
        elif self.policy == "adaptive":
            if not 0.0 <= self.p_low < self.p_high < 1.0:
                raise ConfigError(f"{where}: adaptive needs 0 <= p_low < p_high < 1")
            if self.eta <= 0 or self.freq < 1:
                raise ConfigError(f"{where}: eta must be > 0 and freq >= 1")
            if self.compare not in ("check", "step"):
                raise ConfigError(f"{where}: compare must be check or step")
        else:
            raise ConfigError(f"{where}: unknown policy {self.policy!r}")

    def build(self):
        if self.policy == "fixed":
            return FixedTolerance(self.p)
        return ToleranceSchedule(self.p_low, self.p_high, self.eta, self.freq, self.compare)

    def label(self) -> str:
        if self.policy == "fixed":
            return f"fixed p={self.p:g}"
        return f"adaptive {self.p_low:g}/{self.p_high:g}"


@dataclass
class NetworkConfig:
    base_loss: float = 0.0
    bursts: tuple[tuple[int, float], ...] = ()
    loss_model: str = "iid"
    max_payload: int = DEFAULT_MAX_PAYLOAD
    fixed_delay: float = 50e-6
    jitter: float = 0.0
    send_cost: float = 20e-6
    control_delay: float = 50e-6
    compute_time: float = 0.0

    def schedule(self, seed: int) -> LossSchedule:
        return LossSchedule(self.base_loss, self.bursts, seed, self.loss_model)

    def delay(self) -> DelayModel:
        return DelayModel(self.fixed_delay, self.jitter)

    def timing(self) -> LinkTiming:
        return LinkTiming(self.send_cost, self.control_delay)


@dataclass
class WorkloadConfig:
    kind: str = "synthetic"
    layout: tuple[tuple[str, int], ...] = (("grad", 346000),)
    profile: str = ""
    classes: int = 3
    features: int = 10
    separation: float = 6.0
    examples: int = 600
    batch_size: int = 32
    lr: float = 0.1

    @property
    def elements(self) -> int:
        if self.kind == "toy":
            return self.classes * self.features + self.classes
        return sum(c for _, c in self.layout)


@dataclass
class SocketConfig:
    listen: str = "127.0.0.1:5555"
    connect: str = "127.0.0.1:5555"
    probe_timeout: float = 0.2
    recv_timeout: float = 30.0


@dataclass
class ExperimentConfig:
    name: str = "custom"
    mode: str = "simulate"
    workers: int = 3
    steps: int = 100
    seed: int = 0
    out: str = "runs"
    tolerance: ToleranceConfig = field(default_factory=ToleranceConfig)
    baseline: ToleranceConfig | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    socket: SocketConfig = field(default_factory=SocketConfig)

    def validate(self) -> ExperimentConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        self.tolerance.validate("tolerance")
        if self.baseline is not None:
            self.baseline.validate("baseline")
        net = self.network
        try:
            net.schedule(self.seed)
            net.delay()
        except ValueError as e:
            raise ConfigError(f"network: {e}") from None
        if net.send_cost < 0 or net.control_delay < 0 or net.compute_time < 0:
            raise ConfigError("network: timings must be non-negative")
        if net.max_payload < 4 or net.max_payload % 4 or net.max_payload + HEADER.size > MAX_DATAGRAM_BYTES:
            raise ConfigError(f"network: max_payload must be a multiple of 4 in [4, "
                              f"{MAX_DATAGRAM_BYTES - HEADER.size}]")
        wl = self.workload
        if wl.kind not in ("synthetic", "toy"):
            raise ConfigError(f"workload: unknown kind {wl.kind!r}")
        if wl.elements <= 0 or any(c <= 0 for _, c in wl.layout):
            raise ConfigError("workload: empty model")
        if math.ceil(4 * wl.elements / net.max_payload) >= 2**32:
            raise ConfigError("workload: model too large for 32-bit chunk indices")
        if wl.kind == "synthetic":
            try:
                prof = self.norm_profile()
            except ValueError as e:
                raise ConfigError(f"workload: {e}") from None
            if prof.last_step < self.steps - 1:
                raise ConfigError(f"workload: profile covers steps 0-{prof.last_step}, run needs {self.steps}")
        else:
            if wl.classes < 2 or wl.features < wl.classes or wl.examples < 1 or wl.batch_size < 1 or wl.lr <= 0:
                raise ConfigError("workload: bad toy trainer parameters")
        for key in ("listen", "connect"):
            try:
                parse_address(getattr(self.socket, key))
            except ValueError as e:
                raise ConfigError(f"socket: {e}") from None
        return self

    def norm_profile(self) -> NormProfile:
        if self.workload.profile:
            return NormProfile.parse(self.workload.profile)
        return NormProfile.constant(self.steps)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["experiment"] = {k: str(getattr(self, k)) for k in ("name", "mode", "workers", "steps", "seed", "out")}
        cp["tolerance"] = _section(asdict(self.tolerance))
        if self.baseline is not None:
            cp["baseline"] = _section(asdict(self.baseline))
        net = asdict(self.network)
        net["bursts"] = ", ".join(f"{r}:{x:g}" for r, x in self.network.bursts)
        cp["network"] = _section(net)
        wl = asdict(self.workload)
        wl["layout"] = ", ".join(f"{n}:{c}" for n, c in self.workload.layout)
        cp["workload"] = _section(wl)
        cp["socket"] = _section(asdict(self.socket))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _section(d: dict) -> dict[str, str]:
    return {k: repr(v) if isinstance(v, float) else str(v) for k, v in d.items()}


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    p = int(port)
    if not 0 <= p < 65536:
        raise ValueError(f"port out of range: {p}")
    return host, p


def _pairs(text: str, conv) -> tuple:
    out = []
    for part in text.split(","):
        part = part.strip()
        if part:
            a, b = part.split(":")
            out.append(conv(a.strip(), b.strip()))
    return tuple(out)


def _fill(obj, section: configparser.SectionProxy, special=None):
    special = special or {}
    known = {f for f in obj.__dataclass_fields__}
    updates = {}
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            if key in special:
                updates[key] = special[key](raw)
            else:
                cur = getattr(obj, key)
                updates[key] = type(cur)(raw) if not isinstance(cur, bool) else section.getboolean(key)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section.name}] {key}: {e}") from None
    return replace(obj, **updates)


def from_ini(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    if base is None:
        # a config may start from a preset and override parts of it
        base = preset(cp.get("experiment", "preset")) if cp.has_option("experiment", "preset") else ExperimentConfig()
    if cp.has_section("experiment"):
        cp.remove_option("experiment", "preset")
    cfg = base
    unknown = set(cp.sections()) - {"experiment", "tolerance", "baseline", "network", "workload", "socket"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    if "experiment" in cp:
        cfg = _fill(cfg, cp["experiment"])
    if "tolerance" in cp:
        cfg.tolerance = _fill(cfg.tolerance, cp["tolerance"])
    if "baseline" in cp:
        cfg.baseline = _fill(cfg.baseline or ToleranceConfig(policy="fixed"), cp["baseline"])
    if "network" in cp:
        cfg.network = _fill(cfg.network, cp["network"],
                            {"bursts": lambda s: _pairs(s, lambda a, b: (int(a), float(b)))})
    if "workload" in cp:
        cfg.workload = _fill(cfg.workload, cp["workload"],
                             {"layout": lambda s: _pairs(s, lambda a, b: (a, int(b)))})
    if "socket" in cp:
        cfg.socket = _fill(cfg.socket, cp["socket"])
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            return from_ini(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None


PRESETS = {
    "microburst-effnet": """
[experiment]
name = microburst-effnet
steps = 930
workers = 3
[tolerance]
policy = adaptive
p_low = 0.008
p_high = 0.408
[baseline]
policy = fixed
p = 0.008
[network]
base_loss = 0.05
bursts = 279:0.7, 651:0.7
loss_model = stratified
[workload]
kind = synthetic
layout = grad:346000
profile = 0-99:10, 100-399:4, 400-799:1.5, 800-929:0.6
""",
    "microburst-resnet": """
[experiment]
name = microburst-resnet
steps = 1395
workers = 3
[tolerance]
policy = adaptive
p_low = 0.024
p_high = 0.424
[baseline]
policy = fixed
p = 0.024
[network]
base_loss = 0.05
bursts = 372:0.7, 651:0.7, 1209:0.7
loss_model = stratified
[workload]
kind = synthetic
layout = grad:346000
profile = 0-99:10, 100-499:4, 500-999:1.5, 1000-1394:0.6
""",
    "background-loss": """
[experiment]
name = background-loss
steps = 500
workers = 3
[tolerance]
policy = adaptive
p_low = 0.008
p_high = 0.408
[baseline]
policy = fixed
p = 0.008
[network]
base_loss = 0.05
loss_model = stratified
[workload]
kind = synthetic
layout = grad:346000
profile = 0-199:10, 200-499:4
""",
    "toy-convergence": """
[experiment]
name = toy-convergence
steps = 200
workers = 3
[tolerance]
policy = adaptive
p_low = 0.008
p_high = 0.40
[baseline]
policy = fixed
p = 0.0
[network]
base_loss = 0.3
loss_model = iid
max_payload = 4
[workload]
kind = toy
classes = 3
features = 10
separation = 6.0
examples = 600
batch_size = 32
lr = 0.1
""",
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return from_ini(PRESETS[name])
