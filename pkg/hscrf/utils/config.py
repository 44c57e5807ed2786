import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from hscrf.utils.errors import ConfigError
from hscrf.utils.logger import get_logger

logger = get_logger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


def load_config() -> Dict[str, Any]:
    """Load run configuration from environment variables (and a .env file).

    Returns:
        Dictionary containing configuration values
    """
    logger.debug("Loading environment variables from .env file")
    load_dotenv()

    config = {
        "app": {
            "debug": os.environ.get("HSCRF_DEBUG", "false").lower() == "true",
            "log_level": os.environ.get("HSCRF_LOG_LEVEL", ""),
        },
        "run": {
            "seed": os.environ.get("HSCRF_SEED", "0"),
            "jobs": os.environ.get("HSCRF_JOBS", "1"),
            "output_dir": os.environ.get("HSCRF_OUTPUT_DIR", "results"),
        },
    }

    logger.debug(f"HSCRF_DEBUG: {config['app']['debug']}")
    logger.debug(f"HSCRF_SEED: {config['run']['seed']}, HSCRF_JOBS: {config['run']['jobs']}")

    _validate_config(config)
    return config


def _validate_config(config: Dict[str, Any]) -> None:
    """Coerce numeric run settings, falling back to defaults with a warning.

    Args:
        config: Configuration dictionary to validate (modified in place)
    """
    for key, default, minimum in (("seed", 0, 0), ("jobs", 1, 1)):
        raw = config["run"][key]
        try:
            value = int(raw)
            if value < minimum:
                raise ValueError(raw)
        except (TypeError, ValueError):
            logger.warning(f"Invalid HSCRF_{key.upper()}={raw!r}; using {default}")
            value = default
        config["run"][key] = value


# --------------------------------------------------------------------------
# Experiment configuration (TOML)
# --------------------------------------------------------------------------


class Source(str, Enum):
    """Where a potential's table comes from."""

    MACHINE = "machine"
    HUMAN = "human"
    GT = "gt"
    REMOVE = "remove"


COMPONENTS: Tuple[str, ...] = (
    "seg_unary",
    "seg_unary_aux",
    "supseg_unary",
    "pn",
    "class_unary",
    "class_tree",
    "detection",
    "shape",
    "scene_unary",
    "scene_class",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ComponentSources(_Strict):
    seg_unary: Source = Source.MACHINE
    seg_unary_aux: Source = Source.REMOVE
    supseg_unary: Source = Source.MACHINE
    pn: Source = Source.MACHINE
    class_unary: Source = Source.MACHINE
    class_tree: Source = Source.MACHINE
    detection: Source = Source.MACHINE
    shape: Source = Source.MACHINE
    scene_unary: Source = Source.MACHINE
    scene_class: Source = Source.MACHINE

    @model_validator(mode="before")
    @classmethod
    def _lowercase(cls, data: Any) -> Any:
        if isinstance(data, dict):
            return {k: v.lower() if isinstance(v, str) else v for k, v in data.items()}
        return data

    @field_validator("pn")
    @classmethod
    def _pn_is_structural(cls, value: Source) -> Source:
        if value not in (Source.MACHINE, Source.REMOVE):
            raise ValueError("pn is structural: use 'machine' (present) or 'remove'")
        return value

    def removed(self) -> List[str]:
        return [name for name in COMPONENTS if getattr(self, name) is Source.REMOVE]


class LossWeights(_Strict):
    segment: float = Field(1.0, ge=0)
    supersegment: float = Field(1.0, ge=0)
    detection: float = Field(1.0, ge=0)
    class_presence: float = Field(1.0, ge=0)
    scene: float = Field(1.0, ge=0)


class LearnOptions(_Strict):
    epochs: int = Field(30, ge=1)
    eta0: float = Field(0.1, gt=0)
    lam: float = Field(1e-3, ge=0)
    init_weight: float = Field(1.0, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    damping: float = Field(0.5, ge=0, lt=1)
    max_iters: int = Field(200, ge=1)
    tol: float = Field(1e-5, gt=0)
    skip: bool = False


class ExperimentConfig(_Strict):
    """One ablation configuration: per-component sources plus run options."""

    label: str = "machine"
    components: ComponentSources = ComponentSources()
    learn: LearnOptions = LearnOptions()
    min_area: int = Field(10, ge=0)
    shape_prior: Literal["detector", "distance_transform", "naive"] = "detector"
    clamp_classes: bool = False
    clamp_scene: bool = False
    clamp_detections: bool = False
    allow_disconnected: bool = False
    small_segment_uniform: bool = False
    output_dir: Optional[str] = None

    def canonical_hash(self) -> str:
        """Hash of everything that affects results (label and output dir excluded)."""
        payload = self.model_dump(mode="json", exclude={"label", "output_dir"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:16]

    def with_components(self, label: Optional[str] = None, **sources: Source) -> "ExperimentConfig":
        unknown = set(sources) - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"Unknown components: {sorted(unknown)}")
        components = self.components.model_copy(update=sources)
        return self.model_copy(update={"components": components, "label": label or self.label})

    def is_all_machine(self) -> bool:
        return self.components == ComponentSources() and not (
            self.clamp_classes or self.clamp_scene or self.clamp_detections
        )


class GridFile(_Strict):
    data: Optional[str] = None
    output_dir: str = "results/ablation"
    base: ExperimentConfig = ExperimentConfig()
    sweep: List[str] = []
    experiment: List[ExperimentConfig] = []

    @field_validator("sweep")
    @classmethod
    def _known_components(cls, value: List[str]) -> List[str]:
        unknown = [name for name in value if name not in COMPONENTS]
        if unknown:
            raise ValueError(f"unknown components in sweep: {unknown}")
        return value


class SequenceFile(_Strict):
    data: Optional[str] = None
    output_dir: str = "results/journey"
    step: List[ExperimentConfig] = Field(min_length=1)


# --------------------------------------------------------------------------
# Synthetic generator configuration (TOML)
# --------------------------------------------------------------------------

DEFAULT_CLASSES = ["sky", "grass", "tree", "road", "water", "building", "cow", "sheep", "car", "boat"]
DEFAULT_THINGS = {"cow", "sheep", "car", "boat"}
DEFAULT_SCENES = ["countryside", "city", "harbor"]
DEFAULT_PRESENCE = {
    "countryside": {"sky": 0.9, "grass": 1.0, "tree": 0.7, "road": 0.2, "cow": 0.6, "sheep": 0.5},
    "city": {"sky": 0.9, "road": 1.0, "building": 0.9, "tree": 0.3, "grass": 0.2, "car": 0.8},
    "harbor": {"sky": 0.9, "water": 1.0, "building": 0.5, "boat": 0.8, "road": 0.2, "car": 0.2},
}
# Classes that appear next to each other in scenes. Disjoint from the visual groups below.
DEFAULT_ADJACENCY = [
    ("sky", "tree", 1.0),
    ("sky", "building", 1.0),
    ("grass", "cow", 1.0),
    ("grass", "sheep", 1.0),
    ("grass", "road", 0.5),
    ("road", "car", 1.0),
    ("water", "boat", 1.0),
]
DEFAULT_SIMILARITY = [["grass", "tree"], ["sky", "water"], ["cow", "sheep"], ["car", "boat"], ["road", "building"]]
DEFAULT_HOSTS = {"cow": "grass", "sheep": "grass", "car": "road", "boat": "water"}


class ChannelSpec(_Strict):
    kind: Literal["contextual", "visual"]
    strength: float = Field(ge=0, le=1)
    spread: float = Field(0.0, ge=0, le=1)


class GeneratorConfig(_Strict):
    seed: int = 0
    classes: List[str] = DEFAULT_CLASSES
    things: List[str] = sorted(DEFAULT_THINGS)
    scene_types: List[str] = DEFAULT_SCENES
    scene_presence: Dict[str, Dict[str, float]] = DEFAULT_PRESENCE
    adjacency: List[Tuple[str, str, float]] = DEFAULT_ADJACENCY
    similarity_groups: List[List[str]] = DEFAULT_SIMILARITY
    hosts: Dict[str, str] = DEFAULT_HOSTS
    band_class: Optional[str] = "sky"
    height: int = Field(48, ge=16)
    width: int = Field(64, ge=16)
    n_train: int = Field(40, ge=0)
    n_test: int = Field(40, ge=0)
    segment_block: int = Field(8, ge=2)
    supersegment_block: int = Field(16, ge=2)
    n_components: int = Field(2, ge=1, le=2)
    machine_channel: ChannelSpec = ChannelSpec(kind="contextual", strength=0.35, spread=0.05)
    human_channel: ChannelSpec = ChannelSpec(kind="visual", strength=0.35, spread=0.25)
    hardness_concentration: float = Field(2.0, gt=0)
    jitter_alpha: float = Field(50.0, gt=0)
    scene_noise_machine: float = Field(0.45, ge=0, le=1)
    scene_noise_human: float = Field(0.25, ge=0, le=1)
    false_positive_rate: float = Field(0.5, ge=0)
    miss_rate: float = Field(0.1, ge=0, le=1)
    component_error: float = Field(0.2, ge=0, le=1)
    box_jitter: int = Field(2, ge=0)
    tp_score_mean: float = 1.0
    fp_score_mean: float = -0.5
    score_sd: float = Field(1.0, ge=0)
    seg_jitter: int = Field(1, ge=0)
    edge_noise: float = Field(0.02, ge=0, le=1)
    void_border: int = Field(0, ge=0)
    n_subjects: int = Field(10, ge=1)
    preference_subjects: int = Field(10, ge=1)
    preference_noise: float = Field(0.1, ge=0, le=1)

    @model_validator(mode="after")
    def _consistent(self) -> "GeneratorConfig":
        classes = set(self.classes)
        if len(classes) != len(self.classes):
            raise ValueError("class names must be unique")
        if len(self.classes) < 2 or len(self.scene_types) < 1:
            raise ValueError("need at least 2 classes and 1 scene type")
        if not set(self.things) <= classes:
            raise ValueError("things must be classes")
        if set(self.scene_presence) != set(self.scene_types):
            raise ValueError("scene_presence must have one entry per scene type")
        stuff = classes - set(self.things)
        for scene, probs in self.scene_presence.items():
            if not set(probs) <= classes:
                raise ValueError(f"scene {scene}: unknown classes {sorted(set(probs) - classes)}")
            if any(not 0.0 <= p <= 1.0 for p in probs.values()):
                raise ValueError(f"scene {scene}: presence probabilities must be in [0, 1]")
            if not any(probs.get(name, 0.0) > 0 for name in stuff):
                raise ValueError(f"infeasible config: scene {scene} can never contain a stuff class")
        for a, b, weight in self.adjacency:
            if a not in classes or b not in classes or weight < 0:
                raise ValueError(f"bad adjacency entry {(a, b, weight)}")
        for group in self.similarity_groups:
            if not set(group) <= classes:
                raise ValueError(f"bad similarity group {group}")
        for thing, host in self.hosts.items():
            if thing not in self.things or host not in stuff:
                raise ValueError(f"bad host mapping {thing} -> {host}")
        if self.band_class is not None and self.band_class not in stuff:
            raise ValueError(f"band_class {self.band_class!r} must be a stuff class")
        if self.supersegment_block % self.segment_block:
            raise ValueError("supersegment_block must be a multiple of segment_block")
        return self


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------


def _read_toml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: file not found") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def _parse(model: Type[ModelT], data: Dict[str, Any], path: Path) -> ModelT:
    try:
        return model.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"{path}: {problems}") from e


def load_experiment_config(path: Path) -> ExperimentConfig:
    logger.info(f"Loading experiment config from {path}")
    return _parse(ExperimentConfig, _read_toml(Path(path)), Path(path))


def load_generator_config(path: Path) -> GeneratorConfig:
    logger.info(f"Loading generator config from {path}")
    return _parse(GeneratorConfig, _read_toml(Path(path)), Path(path))


def load_grid(path: Path) -> GridFile:
    logger.info(f"Loading ablation grid from {path}")
    return _parse(GridFile, _read_toml(Path(path)), Path(path))


def load_sequence(path: Path) -> SequenceFile:
    logger.info(f"Loading journey sequence from {path}")
    return _parse(SequenceFile, _read_toml(Path(path)), Path(path))
