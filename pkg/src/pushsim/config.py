"""Run configuration: JSON config file plus flag overrides (flags win)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .netsim import CENTRALISED, DECENTRALISED, CostTable


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    scenario: int = 1
    topology: str = CENTRALISED
    messages: int = 1
    bulk: bool = False
    independent_encryption: bool = True
    fresh_aik_per_push: bool = False
    aik_prefetch: bool = False
    tamper_after: Optional[int] = None
    noc_down_after: Optional[int] = None
    noc_malicious_markers: list[str] = field(default_factory=list)
    cost_overrides: dict = field(default_factory=dict)
    seed: int = 0
    pcr_selection: list[int] = field(default_factory=lambda: [10])
    cipher_suite: str = "ed25519-x25519"  # "rsa1024" preset also supported
    whitelist_extra: dict = field(default_factory=dict)  # name -> [hex digests]
    transcript_path: str = "transcript.jsonl"
    report_path: str = "report.json"
    keystore_path: str = "keystore"
    dump_noc_path: Optional[str] = None

    def validate(self) -> "RunConfig":
        if self.scenario not in (1, 2):
            raise ConfigError(f"scenario must be 1 or 2, got {self.scenario}")
        if self.topology not in (CENTRALISED, DECENTRALISED):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.messages < 0:
            raise ConfigError("messages must be >= 0")
        if self.tamper_after is not None and not 0 <= self.tamper_after <= self.messages:
            raise ConfigError("tamper_after must lie in 0..messages")
        if self.noc_down_after is not None and self.noc_down_after < 0:
            raise ConfigError("noc_down_after must be >= 0")
        if self.bulk:
            for name, value in (("tamper_after", self.tamper_after),
                                ("noc_down_after", self.noc_down_after)):
                if value is not None and 0 < value < self.messages:
                    raise ConfigError(
                        f"{name}={value} falls inside the bulk batch; "
                        "bulk events are only representable at 0 or messages"
                    )
        if not self.pcr_selection or not all(0 <= i < 24 for i in self.pcr_selection):
            raise ConfigError("pcr_selection must be a non-empty subset of 0..23")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in 64 bits")
        if self.cipher_suite not in ("ed25519-x25519", "rsa1024"):
            raise ConfigError(f"unknown cipher_suite {self.cipher_suite!r}")
        try:
            CostTable.with_overrides(self.cost_overrides)
        except Exception as exc:
            raise ConfigError(f"bad cost_overrides: {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})
