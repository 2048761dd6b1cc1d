"""Plain-text run configuration with dotted keys.

A config file holds one `section.field = value` assignment per line, with
`#` comments and blank lines ignored. Keys must name a known field (for
example train.lr, physics.kappa, dslob.n_steps); anything else is rejected.
Command-line --set overrides use the same syntax and win over the file. The
effective configuration is echoed to every output directory so a run can be
reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .autodiff import ContractViolation
from .conformal import DEFAULT_ALPHA, DEFAULT_GAMMA, DEFAULT_WINDOW
from .dslob import SyntheticDatasetSpec
from .model import LossWeights
from .physics import PhysicsConfig
from .train import TrainConfig

__all__ = ["RunConfig", "load_config", "parse_assignments", "echo_config"]


@dataclass
class ConformalSettings:
    alpha: float = DEFAULT_ALPHA
    window: int = DEFAULT_WINDOW


@dataclass
class AllocationSettings:
    gamma: float = DEFAULT_GAMMA


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    dslob: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    conformal: ConformalSettings = field(default_factory=ConformalSettings)
    allocate: AllocationSettings = field(default_factory=AllocationSettings)

    def __post_init__(self):
        # the trainer reads physics and loss weights through its own fields
        self.train.physics = self.physics
        self.train.weights = self.loss


# fields that are nested dataclasses, not settable scalars
_HIDDEN = {("train", "weights"), ("train", "physics")}


def _known_fields(section_obj):
    return {f.name: f for f in fields(section_obj)
            if not dataclasses.is_dataclass(f.type) and
            not dataclasses.is_dataclass(getattr(section_obj, f.name))}


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ContractViolation(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw.strip()


def parse_assignments(lines, source="<config>"):
    """[(dotted_key, raw_value)] from config-file lines."""
    out = []
    for ln, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ContractViolation(f"{source}:{ln}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        out.append((key.strip(), raw.strip()))
    return out


def apply_assignment(cfg: RunConfig, key: str, raw: str):
    if key.count(".") != 1:
        raise ContractViolation(f"unknown config key {key!r} (expected section.field)")
    section, name = key.split(".")
    if not hasattr(cfg, section) or section.startswith("_"):
        raise ContractViolation(f"unknown config section {section!r}")
    obj = getattr(cfg, section)
    if name not in _known_fields(obj):
        raise ContractViolation(f"unknown config key {key!r}")
    setattr(obj, name, _coerce(raw, getattr(obj, name)))


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file plus --set overrides (later assignments win)."""
    cfg = RunConfig()
    assignments = []
    if path is not None:
        with open(path) as f:
            assignments += parse_assignments(f.readlines(), source=str(path))
    assignments += parse_assignments(list(overrides), source="--set")
    for key, raw in assignments:
        apply_assignment(cfg, key, raw)
    # revalidate invariants that depend on assigned values
    cfg.train.__post_init__()
    cfg.loss.__post_init__()
    cfg.__post_init__()
    return cfg


def config_lines(cfg: RunConfig):
    lines = []
    for section in ("train", "physics", "loss", "dslob", "conformal", "allocate"):
        obj = getattr(cfg, section)
        for name in sorted(_known_fields(obj)):
            lines.append(f"{section}.{name} = {getattr(obj, name)}")
    return lines


def echo_config(cfg: RunConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w") as f:
        f.write("\n".join(config_lines(cfg)) + "\n")
