"""Single-file run configuration shared by all CLI commands."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, Field

from .encoders import EncoderConfig
from .evaluation import DR_CLASSES
from .samples import VariantConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig

OUTPUT_ROOT_ENV = "CTXVLF_OUTPUT_ROOT"


class SplitConfig(BaseModel):
    manifest: Optional[str] = None
    train_ratio: float = Field(0.8, gt=0.0, lt=1.0)
    test_ratio: float = Field(0.0, ge=0.0, lt=1.0)

    model_config = {"frozen": True, "extra": "forbid"}


class EvalConfig(BaseModel):
    checkpoints: list[str] = []
    manifests: dict[str, str] = {}
    classes: list[str] = list(DR_CLASSES)
    baselines: Optional[str] = None
    include_ungradable: bool = False

    model_config = {"frozen": True, "extra": "forbid"}


class RunConfig(BaseModel):
    """Every command reads its own section; ``seed`` feeds all seeded components."""

    seed: int = 0
    out: Optional[str] = None
    synthetic: SyntheticSpec = SyntheticSpec()
    split: SplitConfig = SplitConfig()
    variant: VariantConfig = VariantConfig()
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    evaluate: EvalConfig = EvalConfig()
    templates: Optional[str] = None
    augmentations: Optional[str] = None

    model_config = {"frozen": True, "extra": "forbid"}

    def synthetic_spec(self) -> SyntheticSpec:
        return self.synthetic.model_copy(update={"seed": self.seed})

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed})

    def output_dir(self, default: str = "runs") -> Path:
        return Path(self.out or os.environ.get(OUTPUT_ROOT_ENV) or default)

    def dumps(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        return cls.model_validate(yaml.safe_load(text) or {})

    def save(self, path: os.PathLike | str) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: os.PathLike | str) -> "RunConfig":
        """Load YAML or JSON; relative manifest/checkpoint paths resolve against the file's directory."""
        path = Path(path)
        cfg = cls.loads(path.read_text(encoding="utf-8"))
        return cfg._resolve_paths(path.resolve().parent)

    def _resolve_paths(self, base: Path) -> "RunConfig":
        def fix(p: Optional[str]) -> Optional[str]:
            if p is None or Path(p).is_absolute():
                return p
            return str(base / p)

        ev = self.evaluate
        return self.model_copy(update={
            "train_manifest": fix(self.train_manifest),
            "val_manifest": fix(self.val_manifest),
            "templates": fix(self.templates),
            "augmentations": fix(self.augmentations),
            "split": self.split.model_copy(update={"manifest": fix(self.split.manifest)}),
            "evaluate": ev.model_copy(update={
                "checkpoints": [fix(c) for c in ev.checkpoints],
                "manifests": {k: fix(v) for k, v in ev.manifests.items()},
                "baselines": fix(ev.baselines),
            }),
        })
