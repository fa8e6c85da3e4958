"""Experiment configuration: YAML on disk, validated by pydantic models.

Every hyperparameter has a default here, so an empty file is a valid config.
``ExperimentConfig.model_json_schema()`` is the published schema.
"""
import hashlib
from typing import List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datagen import DomainParams, SOURCE_PARAMS, TARGET_PARAMS
from .detector import DetectorConfig

ADVERSARIAL_MODES = ("adversarial",)
DISCREPANCY_MODES = ("mmd", "weighted_mmd", "euclidean", "coral")
MODES = ("none",) + ADVERSARIAL_MODES + DISCREPANCY_MODES
SCHEDULES = ("ssd_adversarial", "mscnn_three_stage", "discrepancy_joint")
COMPATIBLE = {
    "adversarial": ("ssd_adversarial", "mscnn_three_stage"),
    **{m: ("discrepancy_joint",) for m in DISCREPANCY_MODES},
    "none": SCHEDULES,
}


class ConfigError(ValueError):
    """Field-level configuration problem; ``errors`` is a list of (field, message)."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DomainSection(_Section):
    puff_count: Tuple[int, int] = (1, 3)
    puff_radius: Tuple[float, float] = (2.5, 6.5)
    intensity: Tuple[float, float] = (0.6, 1.0)
    background: Tuple[float, float] = (0.05, 0.35)
    texture_noise: float = Field(0.0, ge=0)
    gamma: float = Field(1.0, gt=0)
    clutter_density: float = Field(0.0, ge=0)
    mask_threshold: float = Field(0.15, gt=0, lt=1)

    def params(self):
        return DomainParams(**self.model_dump())

    @classmethod
    def of(cls, params):
        return cls(**{k: getattr(params, k) for k in cls.model_fields})


class DataSection(_Section):
    source_train: int = Field(1000, ge=0)
    target_train: int = Field(10, ge=0)
    target_test: int = Field(300, ge=0)
    source_test: int = Field(100, ge=0)
    image_size: Tuple[int, int] = (64, 64)
    source: DomainSection = DomainSection.of(SOURCE_PARAMS)
    target: DomainSection = DomainSection.of(TARGET_PARAMS)

    def counts(self):
        return {k: getattr(self, k) for k in ("source_train", "target_train", "target_test", "source_test")}


class DetectorSection(_Section):
    trunk_channels: List[int] = [8, 16, 32]
    block_depth: int = Field(2, ge=1)
    detect_blocks: List[int] = [2, 3]
    anchor_sizes: List[float] = [16.0, 32.0]
    aspect_ratios: List[float] = [1.0, 0.5, 2.0]
    match_threshold: float = Field(0.5, gt=0, lt=1)
    neg_pos_ratio: float = Field(3.0, ge=1)
    loc_weight: float = Field(1.0, ge=0)
    nms_iou: float = Field(0.45, gt=0, le=1)


class AdaptationSection(_Section):
    mode: Literal[MODES] = "adversarial"
    schedule: Literal[SCHEDULES] = "ssd_adversarial"
    negatives: Literal["keep", "abandon"] = "keep"
    blocks: List[int] = [2, 3]  # detection blocks that get domain branches / discrepancy terms
    per_class: bool = False  # weighted_mmd: difference class means separately


class TrainSection(_Section):
    pretrain_steps: int = Field(500, ge=0)
    lr: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=2)
    clip_norm: Optional[float] = Field(None, gt=0)


class AdversarialSection(_Section):
    rounds: int = Field(5, ge=0)
    classifier_steps: int = Field(50, ge=0)
    mixer_steps: int = Field(50, ge=0)
    retrain_steps: int = Field(200, ge=0)
    classifier_lr: float = Field(0.02, ge=0)
    mixer_lr: float = Field(0.01, ge=0)
    retrain_lr: float = Field(0.01, ge=0)
    retrain_repre: bool = True
    mixer_clip: Optional[float] = Field(3.0, gt=0)  # first mixer steps can otherwise flatten the trunk
    retrain_clip: Optional[float] = Field(None, gt=0)


class ThreeStageSection(_Section):
    rounds: int = Field(1, ge=0)
    stage1_steps: int = Field(200, ge=0)
    stage2_steps: int = Field(200, ge=0)
    stage3_steps: int = Field(100, ge=0)
    stage1_lam: float = Field(0.1, ge=0)
    lam: float = Field(1.0, ge=0)
    eta: float = Field(0.5, ge=0)
    alphas: Optional[List[float]] = None
    sub_weight: float = Field(1.0, ge=0)
    sub_domain_weight: float = Field(1.0, ge=0)
    lr: float = Field(0.01, ge=0)

    @field_validator("alphas")
    @classmethod
    def _alphas(cls, v):
        if v is not None and any(a < 0 for a in v):
            raise ValueError("weights must be >= 0")
        return v


class DiscrepancySection(_Section):
    steps: int = Field(200, ge=0)
    weight: float = Field(0.1, ge=0)
    lr: float = Field(0.01, ge=0)


class EvalSection(_Section):
    grid: List[float] = [round(0.05 * k, 2) for k in range(1, 20)]
    union: bool = False

    @field_validator("grid")
    @classmethod
    def _grid(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or not all(0 <= t < 1 for t in v):
            raise ValueError("thresholds must be non-empty, strictly increasing, within [0, 1)")
        return v


class CompareSection(_Section):
    target_only_train: int = Field(10, ge=1)
    replicates: int = Field(6, ge=1)
    margin: float = Field(0.02, ge=0)


class ExperimentConfig(_Section):
    seed: int = Field(42, ge=0, lt=2**64)
    output_dir: str = "runs/default"
    data: DataSection = DataSection()
    detector: DetectorSection = DetectorSection()
    adaptation: AdaptationSection = AdaptationSection()
    train: TrainSection = TrainSection()
    adversarial: AdversarialSection = AdversarialSection()
    three_stage: ThreeStageSection = ThreeStageSection()
    discrepancy: DiscrepancySection = DiscrepancySection()
    eval: EvalSection = EvalSection()
    compare: CompareSection = CompareSection()

    @model_validator(mode="after")
    def _compatibility(self):
        a = self.adaptation
        if a.schedule not in COMPATIBLE[a.mode]:
            raise ValueError(
                f"adaptation.schedule: {a.schedule!r} is incompatible with adaptation.mode {a.mode!r} "
                f"(allowed: {', '.join(COMPATIBLE[a.mode])})"
            )
        missing = sorted(set(a.blocks) - set(self.detector.detect_blocks))
        if missing:
            raise ValueError(f"adaptation.blocks: {missing} are not detection blocks {self.detector.detect_blocks}")
        alphas = self.three_stage.alphas
        if alphas is not None and len(alphas) != len(self.detector.detect_blocks):
            raise ValueError("three_stage.alphas: need one weight per detection block")
        # surface detector-level errors here, before any compute
        self.detector_config()
        return self

    # -- derived objects ----------------------------------------------------------

    @property
    def negatives_mode(self):
        return "keep_negatives" if self.adaptation.negatives == "keep" else "abandon_negatives"

    def detector_config(self, adapted=True):
        d = self.detector.model_dump()
        a = self.adaptation
        uses_heads = a.mode == "adversarial" and adapted
        return DetectorConfig(
            image_size=tuple(self.data.image_size),
            domain_blocks=tuple(a.blocks) if uses_heads else (),
            subnet=uses_heads and a.schedule == "mscnn_three_stage",
            **d,
        )

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


def _field_error(err):
    loc = ".".join(str(p) for p in err["loc"])
    msg = err["msg"].removeprefix("Value error, ")
    if not loc:
        # cross-field checks prefix their message with the field they blame
        head, sep, tail = msg.partition(": ")
        if sep and " " not in head:
            return (head if "." in head else f"detector.{head}"), tail
        return "config", msg
    return loc, msg


def parse_config(data):
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError([_field_error(e) for e in exc.errors()]) from None


def load_config(path=None, overrides=()):
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError([("file", f"not valid YAML: {exc}")]) from None
        if not isinstance(data, dict):
            raise ConfigError([("file", "top level must be a mapping")])
    for key, value in overrides:
        apply_override(data, key, value)
    return parse_config(data)


def apply_override(data, key, raw):
    """Set ``a.b.c`` in a nested dict; ``raw`` is parsed as a YAML scalar/list."""
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError([(key, f"{p} is not a section")])
    try:
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    except yaml.YAMLError:
        node[parts[-1]] = raw


def json_schema():
    return ExperimentConfig.model_json_schema()


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------

STREAMS = ("data", "init", "sampling")


def _stream_key(name):
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def seed_sequence(root, name, *extra):
    return np.random.SeedSequence(int(root), spawn_key=(_stream_key(name),) + tuple(int(e) for e in extra))


def substream(root, name, *extra):
    """Independent generator for a named purpose under the root seed."""
    return np.random.default_rng(seed_sequence(root, name, *extra))


def subseed(root, name, *extra):
    """A 63-bit integer seed for components that take plain integers."""
    return int(seed_sequence(root, name, *extra).generate_state(1, np.uint64)[0] >> np.uint64(1))
