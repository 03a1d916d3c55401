"""Pipeline configuration loaded from one JSON file, with CLI flag overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, replace
from typing import Any, Optional

from .errors import ValidationError
from .imaging import CHAINS, EnhanceParams, JitterParams
from .pseudolabel import AdapterSpec, ThresholdPolicy


@dataclass(frozen=True)
class Paths:
    labeled: Optional[str] = None
    unlabeled_images: Optional[str] = None
    unlabeled_manifest: Optional[str] = None
    output_dir: Optional[str] = None


@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    vflip: bool = True
    hsv: bool = True
    translate: float = 0.1  # max shift as a fraction of image size
    scale: float = 0.5  # factor drawn from [1 - scale, 1 + scale]

    def __post_init__(self):
        if not 0.0 <= self.translate <= 1.0:
            raise ValidationError(f"translate must lie in [0, 1], got {self.translate}")
        if not 0.0 <= self.scale < 1.0:
            raise ValidationError(f"scale must lie in [0, 1), got {self.scale}")


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths = Paths()
    chain: str = "soft"
    enhance: EnhanceParams = EnhanceParams()
    jitter: JitterParams = JitterParams()
    augment: AugmentFlags = AugmentFlags()
    adapter: Optional[AdapterSpec] = None
    threshold: ThresholdPolicy = ThresholdPolicy()
    enhance_before_inference: bool = False
    iou_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.chain not in CHAINS:
            raise ValidationError(f"chain must be one of {CHAINS}, got {self.chain!r}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def parameters(self) -> dict:
        """Everything that affects outputs, minus file locations."""
        d = asdict(self)
        d.pop("paths")
        if self.adapter is not None:
            d["adapter"] = {"mode": self.adapter.mode, "command": list(self.adapter.command),
                            "timeout": self.adapter.timeout, "path": self.adapter.path}
        d["enhance"]["clahe_tiles"] = list(self.enhance.clahe_tiles)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.parameters(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_overrides(self, **kw: Any) -> "PipelineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "tau" in kw:
            kw["threshold"] = ThresholdPolicy(kw.pop("tau"))
        if "seed" in kw:
            kw["jitter"] = replace(self.jitter, seed=kw["seed"])
        return replace(self, **kw)


def _resolve(base: str, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    return p if os.path.isabs(p) else os.path.normpath(os.path.join(base, p))


def _section(doc: dict, key: str) -> dict:
    v = doc.get(key, {})
    if not isinstance(v, dict):
        raise ValidationError(f"config section '{key}' must be an object")
    return v


def config_from_dict(doc: dict, base_dir: str = ".") -> PipelineConfig:
    known = {"paths", "enhance", "jitter", "augment", "adapter", "threshold", "eval", "seed", "pseudo_label"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    try:
        paths = Paths(**{k: _resolve(base_dir, v) for k, v in _section(doc, "paths").items()})
        enh = dict(_section(doc, "enhance"))
        chain = enh.pop("chain", "soft")
        if "clahe_tiles" in enh:
            enh["clahe_tiles"] = tuple(enh["clahe_tiles"])
        seed = int(doc.get("seed", 0))
        jitter = JitterParams(**_section(doc, "jitter"), seed=seed)
        augment = AugmentFlags(**_section(doc, "augment"))
        adapter = None
        if "adapter" in doc:
            a = dict(_section(doc, "adapter"))
            if a.get("path"):
                a["path"] = _resolve(base_dir, a["path"])
            adapter = AdapterSpec(**a)
        pl = _section(doc, "pseudo_label")
        return PipelineConfig(
            paths=paths,
            chain=chain,
            enhance=EnhanceParams(**enh),
            jitter=jitter,
            augment=augment,
            adapter=adapter,
            threshold=ThresholdPolicy(**_section(doc, "threshold")),
            enhance_before_inference=bool(pl.get("enhance_before_inference", False)),
            iou_threshold=float(_section(doc, "eval").get("iou_threshold", 0.5)),
            seed=seed,
        )
    except TypeError as e:
        raise ValidationError(f"bad config: {e}") from e


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, "rb") as f:
        raw = f.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: malformed config JSON: {e.msg} at char {e.pos}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return config_from_dict(doc, os.path.dirname(os.path.abspath(path)))
