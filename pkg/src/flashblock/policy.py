"""Reuse-or-recompute decision logic for cached block-external attention.

The core rule is a token-count threshold: if fewer than ``tau`` tokens in the
current block changed since the previous diffusion step, the cached external
partial is still a good approximation and is reused; otherwise it is
recomputed and refreshed.  An optional per-head gate, calibrated offline from
cross-step similarity of the external partials, restricts reuse to heads
whose external attention is empirically stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import ShapeError, cosine_similarity

__all__ = [
    "Decision",
    "MODES",
    "ReuseConfig",
    "decide",
    "count_updated_tokens",
    "HeadGate",
    "HeadGateTable",
    "CalibrationError",
    "calibrate_head_gates",
]

MODES = ("token-threshold", "head-gated", "always-recompute", "always-reuse")


class Decision(Enum):
    REUSE = "Reuse"
    RECOMPUTE = "Recompute"


class CalibrationError(RuntimeError):
    """Raised when head-gate calibration sees no usable signal."""


@dataclass(frozen=True)
class ReuseConfig:
    """Policy knobs.

    Attributes:
        tau: recompute once at least this many block tokens changed since the
            previous step (>= 1).
        gamma: similarity threshold for head gating, in [0, 1].
        mode: one of ``token-threshold`` (default), ``head-gated`` (token
            threshold plus per-head gates), ``always-recompute`` (dense
            baseline) or ``always-reuse`` (stress test).
    """

    tau: int = 2
    gamma: float = 0.9
    mode: str = "token-threshold"

    def __post_init__(self) -> None:
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")


def decide(
    config: ReuseConfig,
    cache_valid: bool,
    first_visit: bool,
    updated_tokens: int,
    head_gate: bool = True,
) -> Decision:
    """Pure decision function; no hidden state, safe to call per head.

    Recompute is forced when there is nothing valid to reuse (first visit to
    a block, or invalidated cache).  Beyond that, ``always-recompute`` and
    ``always-reuse`` override the threshold and gating rules.
    """
    if first_visit or not cache_valid:
        return Decision.RECOMPUTE
    if config.mode == "always-recompute":
        return Decision.RECOMPUTE
    if config.mode == "always-reuse":
        return Decision.REUSE
    if updated_tokens >= config.tau:
        return Decision.RECOMPUTE
    if config.mode == "head-gated" and not head_gate:
        return Decision.RECOMPUTE
    return Decision.REUSE


def count_updated_tokens(prev_ids: np.ndarray, curr_ids: np.ndarray) -> int:
    """Hamming distance between two token-id vectors of equal length.

    Any flip counts as an update: unmasking, re-masking, or a changed
    committed prediction.
    """
    prev = np.asarray(prev_ids)
    curr = np.asarray(curr_ids)
    if prev.shape != curr.shape or prev.ndim != 1:
        raise ShapeError(f"token id vectors differ in shape: {prev.shape} vs {curr.shape}")
    return int(np.count_nonzero(prev != curr))


@dataclass(frozen=True)
class HeadGate:
    """Calibration record for one (layer, head) pair.

    ``similarity`` is the mean adjacent-step cosine similarity of the head's
    external partial outputs; ``similarity_min`` is the worst pair observed,
    kept as an alternative (more conservative) gating statistic.
    """

    layer: int
    head: int
    similarity: float
    similarity_min: float
    enabled: bool


class HeadGateTable:
    """Per-head reuse gates derived from offline similarity calibration."""

    def __init__(self, gamma: float, heads: list[HeadGate]):
        for g in heads:
            if g.enabled != (g.similarity > gamma):
                raise ValueError(
                    f"gate for ({g.layer}, {g.head}) inconsistent with gamma={gamma}"
                )
        self.gamma = gamma
        self.heads = list(heads)
        self._enabled = {(g.layer, g.head): g.enabled for g in heads}

    @classmethod
    def from_similarities(
        cls, gamma: float, stats: dict[tuple[int, int], tuple[float, float]]
    ) -> "HeadGateTable":
        heads = [
            HeadGate(layer, head, mean, worst, mean > gamma)
            for (layer, head), (mean, worst) in sorted(stats.items())
        ]
        return cls(gamma, heads)

    def is_enabled(self, layer: int, head: int) -> bool:
        return self._enabled.get((layer, head), False)

    def to_json(self) -> str:
        doc = {
            "gamma": self.gamma,
            "heads": [
                {
                    "layer": g.layer,
                    "head": g.head,
                    "similarity": g.similarity,
                    "similarity_min": g.similarity_min,
                    "enabled": g.enabled,
                }
                for g in self.heads
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HeadGateTable":
        doc = json.loads(text)
        heads = [
            HeadGate(
                int(h["layer"]),
                int(h["head"]),
                float(h["similarity"]),
                float(h.get("similarity_min", h["similarity"])),
                bool(h["enabled"]),
            )
            for h in doc["heads"]
        ]
        return cls(float(doc["gamma"]), heads)


def calibrate_head_gates(
    model,
    samples: int,
    gamma: float,
    *,
    prompt_len: int = 64,
    block_size: int = 8,
    steps_per_block: int = 8,
    unmask_per_step: int = 1,
    base_seed: int = 0,
) -> HeadGateTable:
    """Calibrate per-head gates from short always-recompute rollouts.

    For each rollout the external partial output of every (layer, head) is
    recorded at every step; the gate statistic is the mean (and min) over
    adjacent-step pairs of the per-row cosine similarity between consecutive
    partials.  Heads whose mean similarity exceeds ``gamma`` are enabled.

    Raises ``CalibrationError`` when every recorded partial is numerically
    zero (a degenerate model produces no gating signal).
    """
    # Imported here: the simulator depends on this module for decisions.
    from .analysis import PartialRecorder
    from .simulator import run_sequence

    if samples < 1:
        raise ValueError("samples must be >= 1")
    cfg = model.config
    per_head: dict[tuple[int, int], list[float]] = {
        (l, h): [] for l in range(cfg.num_layers) for h in range(cfg.num_heads)
    }
    saw_signal = False
    policy = ReuseConfig(mode="always-recompute")
    for i in range(samples):
        rec = PartialRecorder()
        run_sequence(
            model,
            prompt_len,
            1,
            block_size,
            steps_per_block,
            policy,
            seed=base_seed + i,
            unmask_per_step=unmask_per_step,
            recorder=rec,
        )
        for (layer, head, block), outs in rec.external_by_head().items():
            for step in range(len(outs) - 1):
                prev, curr = outs[step], outs[step + 1]
                sims = [
                    cosine_similarity(curr[row], prev[row])
                    for row in range(curr.shape[0])
                ]
                if float(np.max(np.abs(prev))) > 0 or float(np.max(np.abs(curr))) > 0:
                    saw_signal = True
                per_head[(layer, head)].append(float(np.mean(sims)))
    if not saw_signal:
        raise CalibrationError("all recorded external partials are zero")
    stats = {
        key: (float(np.mean(vals)), float(np.min(vals)))
        for key, vals in per_head.items()
    }
    return HeadGateTable.from_similarities(gamma, stats)
