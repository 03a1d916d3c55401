"""Loss arithmetic and checkpoint averaging, independent of any network code."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, ValidationError

EPS = 1e-7


@dataclass(frozen=True)
class GainCoefficients:
    lambda_b: float = 7.5
    lambda_c: float = 0.5
    lambda_s: float = 0.468
    lambda_f: float = 2.0

    def __post_init__(self):
        for name in ("lambda_b", "lambda_c", "lambda_s", "lambda_f"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be a nonnegative finite number, got {v}")


@dataclass(frozen=True)
class LossComponents:
    l_c: float
    l_f: float
    l_s: float
    l_b: float

    def __post_init__(self):
        for name in ("l_c", "l_f", "l_s", "l_b"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be a nonnegative finite number, got {v}")


def bce(p, y) -> float:
    """Binary cross-entropy with probabilities clamped to [EPS, 1 - EPS].

    Scalars give a single loss; arrays give the mean over elements.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("bce labels must be 0 or 1")
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)
    losses = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.mean(losses))


def dfl(dist: Sequence[float], target: float) -> float:
    """Distribution focal loss over integer bins ``0..n``.

    The target splits its weight between the two bracketing bins in
    proportion to its distance from each; an integer target uses only its
    own bin.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 1 or d.size < 1:
        raise ContractError("dfl needs a 1-D distribution")
    if np.any(d < 0) or not np.all(np.isfinite(d)) or abs(d.sum() - 1.0) > 1e-6:
        raise ContractError(f"dfl distribution must be nonnegative and sum to 1, sums to {d.sum()}")
    n = d.size - 1
    if not 0.0 <= target <= n:
        raise ContractError(f"dfl target {target} outside [0, {n}]")
    logp = np.log(np.clip(d, EPS, 1.0))
    left = int(math.floor(target))
    if left == target:
        return float(-logp[left])
    right = left + 1
    return float(-((right - target) * logp[left] + (target - left) * logp[right]))


def iou_loss(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """``1 - IoU`` of two ``[x, y, w, h]`` boxes; 1 when the union is empty."""
    ax, ay, aw, ah = map(float, box_a)
    bx, by, bw, bh = map(float, box_b)
    if min(aw, ah, bw, bh) < 0:
        raise ContractError("box width and height must be nonnegative")
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 1.0
    return 1.0 - inter / union


def composite_loss(c: LossComponents, g: GainCoefficients = GainCoefficients()) -> float:
    return g.lambda_c * c.l_c + g.lambda_f * c.l_f + g.lambda_s * c.l_s + g.lambda_b * c.l_b


# -- checkpoints ---------------------------------------------------------------


class Checkpoint:
    """Named map of float64 tensors."""

    def __init__(self, tensors: Mapping[str, np.ndarray], provenance: dict | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        for name in sorted(tensors):
            arr = np.array(tensors[name], dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name!r} holds non-finite values")
            self.tensors[name] = arr
        self.provenance = dict(provenance or {})

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.tensors.keys() == other.tensors.keys() and all(
            self.tensors[k].shape == other.tensors[k].shape and np.array_equal(self.tensors[k], other.tensors[k])
            for k in self.tensors
        )

    def __repr__(self):
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self.tensors.items())
        return f"Checkpoint({shapes})"

    def to_json(self) -> str:
        body = {
            "provenance": self.provenance,
            "tensors": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.tensors.items()
            },
        }
        return json.dumps(body, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str | bytes) -> "Checkpoint":
        doc = json.loads(text)
        tensors = {}
        for name, t in doc.get("tensors", {}).items():
            shape = [int(s) for s in t["shape"]]
            data = np.asarray(t["data"], dtype=np.float64)
            if data.size != math.prod(shape):
                raise ValidationError(f"tensor {name!r}: {data.size} values do not fill shape {shape}")
            tensors[name] = data.reshape(shape)
        return cls(tensors, doc.get("provenance"))


def average_checkpoints(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    """Element-wise arithmetic mean of checkpoints sharing names and shapes.

    Each element is computed as ``m + sum(sorted(x_i - m)) / n`` with ``m`` the
    element-wise minimum, which makes the result exactly independent of the
    argument order and returns identical inputs unchanged.
    """
    if not ckpts:
        raise ContractError("average_checkpoints needs at least one checkpoint")
    ref = ckpts[0]
    for i, ck in enumerate(ckpts[1:], start=1):
        missing = ref.tensors.keys() ^ ck.tensors.keys()
        if missing:
            raise ContractError(f"checkpoint {i}: tensor {sorted(missing)[0]!r} not present in every checkpoint")
        for name, t in ck.tensors.items():
            if t.shape != ref.tensors[name].shape:
                raise ContractError(
                    f"checkpoint {i}: tensor {name!r} has shape {list(t.shape)}, expected {list(ref.tensors[name].shape)}"
                )
    n = len(ckpts)
    out = {}
    for name in ref.tensors:
        stack = np.stack([ck.tensors[name] for ck in ckpts])
        low = stack.min(axis=0)
        dev = np.sort(stack - low, axis=0)
        total = np.zeros_like(low)
        for k in range(n):
            total += dev[k]
        out[name] = low + total / n
    return Checkpoint(out)
