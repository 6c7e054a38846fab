"""JSON pipeline configuration with validation and defaults."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .learning import TrainConfig, TripletConfig
from .loop_detection import LoopDetectConfig
from .mdn import MdnLossConfig
from .outlier_rejection import RejectionConfig
from .pose_graph import BackendConfig
from .simulator import WorldSpec


@dataclass(frozen=True)
class FrontendConfig:
    """How the pipeline turns a scenario into graph constraints.

    ``odometry``: ``"simulated"`` uses the scenario's measured motion and its
    covariances; ``"learned"`` trains an MDN regressor on random-motion data
    and uses its predicted means and variances.  ``loops``: ``"proposals"``
    takes the scenario's loop proposals; ``"detected"`` runs embedding loop
    detection and a simulated loop-closure regressor.  The two covariance
    switches replace MDN covariances by unit ones for ablations.
    """

    odometry: str = "simulated"
    loops: str = "proposals"
    odometry_covariance: str = "mdn"
    loop_covariance: str = "mdn"
    filter_loops: bool = True
    learned_embedding: bool = True
    embedding_dim: int = 128
    n_train_samples: int = 2000
    train_seed_offset: int = 1000
    max_loops: int = 50
    rpe_delta: int = 1

    def __post_init__(self):
        choices = {
            "odometry": ("simulated", "learned"),
            "loops": ("proposals", "detected"),
            "odometry_covariance": ("mdn", "identity"),
            "loop_covariance": ("mdn", "identity"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"frontend.{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.embedding_dim < 1 or self.n_train_samples < 2 or self.max_loops < 0 or self.rpe_delta < 1:
            raise ConfigError("frontend sizes must be positive")


SECTIONS = {
    "world": WorldSpec,
    "detect": LoopDetectConfig,
    "reject": RejectionConfig,
    "backend": BackendConfig,
    "train": TrainConfig,
    "mdn": MdnLossConfig,
    "triplet": TripletConfig,
    "frontend": FrontendConfig,
}


@dataclass(frozen=True)
class PipelineConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    detect: LoopDetectConfig = field(default_factory=LoopDetectConfig)
    reject: RejectionConfig = field(default_factory=RejectionConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mdn: MdnLossConfig = field(default_factory=MdnLossConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    output_dir: str = "out"
    seed: int = 0

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy whose world, rejection and training seeds all follow ``seed``."""
        return replace(
            self,
            seed=int(seed),
            world=replace(self.world, seed=int(seed)),
            reject=replace(self.reject, seed=int(seed)),
            train=replace(self.train, seed=int(seed)),
        )

    def to_dict(self) -> dict:
        d = {}
        for name in SECTIONS:
            sub = getattr(self, name)
            d[name] = sub.to_dict() if hasattr(sub, "to_dict") else _plain(dataclasses.asdict(sub))
        d["output_dir"] = self.output_dir
        d["seed"] = self.seed
        return d

    def sha256(self) -> str:
        """Hash of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object")
    if cls is WorldSpec:
        try:
            return WorldSpec.from_dict(data)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from e
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(data: dict) -> PipelineConfig:
    """Validate a parsed JSON document; missing keys take their defaults.

    A top-level ``seed`` is applied to the world, rejection and training
    seeds unless those sections set their own.
    """
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - set(SECTIONS) - {"output_dir", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _section(cls, data[name], name) for name, cls in SECTIONS.items() if name in data}
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = data.get("output_dir", "out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output_dir must be a non-empty string")
    cfg = PipelineConfig(**kw, output_dir=out, seed=seed)
    if "seed" in data:
        explicit = {name: "seed" in data.get(name, {}) for name in ("world", "reject", "train")}
        seeded = cfg.with_seed(seed)
        cfg = replace(
            seeded,
            world=cfg.world if explicit["world"] else seeded.world,
            reject=cfg.reject if explicit["reject"] else seeded.reject,
            train=cfg.train if explicit["train"] else seeded.train,
        )
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from e
    return config_from_dict(data)


def save_config(path, cfg: PipelineConfig):
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
