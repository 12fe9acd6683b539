"""Run configuration: one TOML file describing a whole pipeline run.

Sections: [run] for workspace and loop sizes, [backends.<role>] for model
endpoints per role (with [backends.default] as the fallback), [sandbox]
for the executor, [explore] and [dpo] for the loop hyperparameters. Every
field has a default, so the minimal config is just a [run] root.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dpo import DpoConfig
from .explorer import ExploreConfig
from .gateway import ROLE_TAGS

__all__ = [
    "BackendConfig",
    "ConfigInvalid",
    "RunConfig",
    "SandboxConfig",
    "load_config",
]

BACKEND_KINDS = frozenset({"scripted", "http"})
SANDBOX_MODES = frozenset({"stub", "socket"})


class ConfigInvalid(ValueError):
    """The configuration file is unreadable or breaks an invariant."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    base_url: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout_s: float = 60.0


@dataclass(frozen=True)
class SandboxConfig:
    mode: str = "stub"
    socket: str = ""
    timeout_s: float = 30.0


@dataclass(frozen=True)
class RunConfig:
    root: str
    iterations: int = 1
    tasks_per_iteration: int = 2
    seed: int = 0
    call_budget: Optional[int] = None
    seed_pool: str = ""
    image_index: str = ""
    backends: dict[str, BackendConfig] = field(default_factory=dict)
    sandbox: SandboxConfig = SandboxConfig()
    explore: ExploreConfig = ExploreConfig()
    dpo: DpoConfig = DpoConfig()

    def backend_for(self, role: str) -> BackendConfig:
        return self.backends.get(role) or self.backends.get("default") or BackendConfig()


def _section(data: dict, name: str) -> dict:
    value = data.get(name, {})
    if not isinstance(value, dict):
        raise ConfigInvalid(f"[{name}] must be a table")
    return value


def _pick(section: dict, cls: type, context: str, **overrides: Any):
    """Build a config dataclass from a TOML table, rejecting unknown keys."""
    allowed = set(cls.__dataclass_fields__)  # type: ignore[attr-defined]
    unknown = set(section) - allowed
    if unknown:
        raise ConfigInvalid(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = dict(section)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{context}: {exc}") from exc


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path} is not valid TOML: {exc}") from exc

    run = _section(data, "run")
    known_sections = {"run", "backends", "sandbox", "explore", "dpo"}
    unknown_sections = set(data) - known_sections
    if unknown_sections:
        raise ConfigInvalid(f"unknown sections {sorted(unknown_sections)}")

    backends: dict[str, BackendConfig] = {}
    for role, table in _section(data, "backends").items():
        if role != "default" and role not in ROLE_TAGS:
            raise ConfigInvalid(f"[backends.{role}]: unknown role")
        if not isinstance(table, dict):
            raise ConfigInvalid(f"[backends.{role}] must be a table")
        backend = _pick(table, BackendConfig, f"[backends.{role}]")
        if backend.kind not in BACKEND_KINDS:
            raise ConfigInvalid(f"[backends.{role}]: kind must be one of {sorted(BACKEND_KINDS)}")
        if backend.kind == "http" and (not backend.base_url or not backend.model):
            raise ConfigInvalid(f"[backends.{role}]: http backends need base_url and model")
        backends[role] = backend

    sandbox = _pick(_section(data, "sandbox"), SandboxConfig, "[sandbox]")
    if sandbox.mode not in SANDBOX_MODES:
        raise ConfigInvalid(f"[sandbox]: mode must be one of {sorted(SANDBOX_MODES)}")
    if sandbox.mode == "socket" and not sandbox.socket:
        raise ConfigInvalid("[sandbox]: socket mode needs a socket path")
    if not (math.isfinite(sandbox.timeout_s) and sandbox.timeout_s > 0):
        raise ConfigInvalid("[sandbox]: timeout_s must be positive")

    explore = _pick(_section(data, "explore"), ExploreConfig, "[explore]")
    # Exploration compares candidates, so one per step is never enough.
    # Inference reuses the same config but overrides n internally.
    if explore.n_candidates < 2:
        raise ConfigInvalid("[explore]: n_candidates must be >= 2")
    dpo = _pick(_section(data, "dpo"), DpoConfig, "[dpo]")

    run_fields = {
        "root",
        "iterations",
        "tasks_per_iteration",
        "seed",
        "call_budget",
        "seed_pool",
        "image_index",
    }
    unknown = set(run) - run_fields
    if unknown:
        raise ConfigInvalid(f"[run]: unknown keys {sorted(unknown)}")
    root = run.get("root")
    if not isinstance(root, str) or not root:
        raise ConfigInvalid("[run]: root is required and must be a path string")
    config = RunConfig(
        root=root,
        iterations=int(run.get("iterations", 1)),
        tasks_per_iteration=int(run.get("tasks_per_iteration", 2)),
        seed=int(run.get("seed", 0)),
        call_budget=int(run["call_budget"]) if "call_budget" in run else None,
        seed_pool=str(run.get("seed_pool", "")),
        image_index=str(run.get("image_index", "")),
        backends=backends,
        sandbox=sandbox,
        explore=explore,
        dpo=dpo,
    )
    if config.iterations < 1:
        raise ConfigInvalid("[run]: iterations must be >= 1")
    if config.tasks_per_iteration < 1:
        raise ConfigInvalid("[run]: tasks_per_iteration must be >= 1")
    if config.call_budget is not None and config.call_budget < 1:
        raise ConfigInvalid("[run]: call_budget must be >= 1 when set")
    return config
