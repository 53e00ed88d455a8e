"""Run configuration shared by every command and embedded in every output."""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields

from . import tensorio
from .errors import ConceptVolError

SEED_ENV = "CONCEPTVOL_SEED"


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConceptVolError(f"{SEED_ENV} must be an integer, got {raw!r}", code="config") from None


@dataclass
class RunConfig:
    seed: int = 0
    n_concepts: int = 20
    visibility: float = 0.1
    epsilon: float = 1e-6
    tau: float = 50.0
    quantile: float = 0.9
    temperature: float = 0.07
    canvas_height: int = 640
    canvas_width: int = 800
    base_focal: float = 3000.0
    distance: float = 15.0
    elevation_deg: float = 30.0
    azimuth_deg: float = -40.0

    def validate(self) -> "RunConfig":
        checks = [
            (self.n_concepts >= 1, "n_concepts must be >= 1"),
            (0.0 <= self.visibility <= 1.0, "visibility must lie in [0, 1]"),
            (self.epsilon > 0, "epsilon must be positive"),
            (0.0 <= self.tau <= 100.0, "tau must lie in [0, 100]"),
            (0.0 <= self.quantile <= 1.0, "quantile must lie in [0, 1]"),
            (self.temperature > 0, "temperature must be positive"),
            (self.canvas_height >= 1 and self.canvas_width >= 1, "canvas must be non-empty"),
            (self.base_focal > 0, "base_focal must be positive"),
            (self.distance > 0, "distance must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConceptVolError(message, code="config")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConceptVolError(f"{f.name} must be finite", code="config")
        return self

    @classmethod
    def from_mapping(cls, entries: dict) -> "RunConfig":
        """Build from string values; unknown keys are rejected."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in entries.items():
            if key not in types:
                raise ConceptVolError(f"unknown config key {key!r}", code="config")
            cast = int if types[key] in ("int", int) else float
            try:
                kwargs[key] = cast(raw)
            except ValueError:
                raise ConceptVolError(f"bad value for {key}: {raw!r}", code="config") from None
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_mapping(tensorio.read_manifest(path))

    def save(self, path) -> None:
        tensorio.write_manifest(path, self.as_dict())

    def as_dict(self) -> dict:
        return asdict(self)

    def embedded(self) -> dict:
        """Entries prefixed with ``config.`` for inclusion in output manifests."""
        return {f"config.{k}": v for k, v in self.as_dict().items()}

    def with_overrides(self, **overrides) -> "RunConfig":
        values = self.as_dict()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**values).validate()
