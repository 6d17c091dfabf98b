"""Pipeline configuration: one flat dataclass stored as ``key = value`` lines.

Angles are written in degrees (``*_deg`` keys). Scenario geometry lives in
scenario files, not here.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .baselines import RansacParams
from .errors import ConfigError
from .kvfile import format_value, parse_bool, parse_float, parse_kv, read_kv
from .segmentation import SegParams
from .surface import UpdateParams


@dataclass(frozen=True)
class PipelineConfig:
    # field of view and accumulation
    phi_deg: float = 60.0
    K: int = 5
    s: float = 1.0
    # segmentation
    N_min: int = 5
    delta_lower: float = 0.5
    delta_upper: float = 0.5
    k: int = 5
    delta_seed: float = 0.2
    tau_d: float = 0.15
    T: int = 3
    theta_u_deg: float = 30.0
    tau_h: float = 0.5
    tau_s: float = 0.15
    delta_z: float = 0.3
    N_re: int = 5
    delta_h: float = 0.3
    delta_recall: float = 0.5
    use_prior_seeds: bool = True
    use_refinement: bool = True
    # terrain prior: linear continuation up to this far outside the domain, then constant
    prior_reach: float = 2.0
    # terrain surface
    rho: float = 0.2
    tau_c: float = 0.1
    k_x: int = 3
    k_y: int = 3
    slope_compensation: bool = True
    h_ref: float = 3.0
    # registration
    max_failure_fraction: float = 0.1
    # baselines
    ransac_iterations: int = 50
    knn_k: int = 4
    knn_power: float = 2.0
    seed: int = 0
    # benchmark
    warmup_frames: int = 2
    rmse_samples: int = 2000
    dense_step: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}", key=key)

        need(0.0 < self.phi_deg <= 90.0, "phi_deg", "must lie in (0, 90]")
        need(0.0 < self.theta_u_deg < 90.0, "theta_u_deg", "must lie in (0, 90)")
        for key in ("s", "delta_lower", "delta_upper", "delta_seed", "tau_d", "tau_h", "tau_s", "delta_z",
                    "delta_h", "delta_recall", "h_ref", "dense_step"):
            need(getattr(self, key) > 0.0, key, "must be > 0")
        for key in ("K", "N_min", "k", "T", "N_re", "ransac_iterations", "knn_k", "rmse_samples"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        for key in ("k_x", "k_y", "warmup_frames"):
            need(getattr(self, key) >= 0, key, "must be >= 0")
        need(0.0 < self.rho < 1.0, "rho", "must lie in (0, 1)")
        need(self.tau_c >= 0.0, "tau_c", "must be >= 0")
        need(self.prior_reach >= 0.0, "prior_reach", "must be >= 0")
        need(self.knn_power > 0.0, "knn_power", "must be > 0")
        need(0.0 <= self.max_failure_fraction <= 1.0, "max_failure_fraction", "must lie in [0, 1]")
        need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")

    @property
    def phi(self) -> float:
        return math.radians(self.phi_deg)

    def seg_params(self) -> SegParams:
        return SegParams(
            N_min=self.N_min,
            delta_lower=self.delta_lower,
            delta_upper=self.delta_upper,
            k=self.k,
            delta_seed=self.delta_seed,
            tau_d=self.tau_d,
            T=self.T,
            theta_u=math.radians(self.theta_u_deg),
            tau_h=self.tau_h,
            tau_s=self.tau_s,
            delta_z=self.delta_z,
            N_re=self.N_re,
            delta_h=self.delta_h,
            delta_recall=self.delta_recall,
            use_prior_seeds=self.use_prior_seeds,
            use_refinement=self.use_refinement,
        )

    def update_params(self) -> UpdateParams:
        return UpdateParams(self.rho, self.tau_c)

    def ransac_params(self) -> RansacParams:
        return RansacParams(self.ransac_iterations, self.tau_d, self.s, self.seed)

    def replace(self, **changes) -> "PipelineConfig":
        unknown = set(changes) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)}; valid keys: {', '.join(_FIELDS)}")
        return dataclasses.replace(self, **changes)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    def comment_lines(self) -> list[str]:
        return [f"# {k} = {format_value(v)}" for k, v in self.items()]

    @classmethod
    def from_entries(cls, entries, path=None, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        values = {}
        for key, text, line_no in entries:
            if key not in _FIELDS:
                raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(_FIELDS)}", path, line_no, key)
            try:
                values[key] = _PARSERS[_FIELDS[key]](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}", path, line_no, key) from None
        base = base or cls()
        try:
            return dataclasses.replace(base, **values)
        except ConfigError as exc:
            line = next((ln for k, _, ln in entries if k == exc.key), None)
            raise ConfigError(str(exc), path, line, exc.key) from None

    @classmethod
    def from_text(cls, text: str, path=None) -> "PipelineConfig":
        return cls.from_entries(parse_kv(text, path), path)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_entries(read_kv(path), Path(path))


def _parse_int(text: str) -> int:
    return int(text, 10)


_PARSERS = {bool: parse_bool, int: _parse_int, float: parse_float}
_FIELDS = {f.name: {"bool": bool, "int": int, "float": float}[f.type] for f in fields(PipelineConfig)}


def load_config(path=None, **overrides) -> PipelineConfig:
    """Defaults, then the file, then explicit overrides (``None`` values ignored)."""
    cfg = PipelineConfig.from_file(path) if path is not None else PipelineConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg
