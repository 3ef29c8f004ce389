"""Cross-step similarity analysis of attention partial outputs.

The reuse policy is justified empirically by one observation: between
adjacent diffusion steps, the block-external partial outputs barely move
(their per-token cosine similarity stays near 1) while the block-internal
ones keep changing.  This module measures exactly that, per (layer, head),
from always-recompute rollouts where both partials are fresh at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ZERO_NORM_EPS, ShapeError
from .policy import ReuseConfig

__all__ = [
    "pairwise_step_similarity",
    "PartialRecorder",
    "StabilityRecord",
    "StabilityResult",
    "stability_study",
]


def pairwise_step_similarity(out_s: np.ndarray, out_s1: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between token outputs of adjacent steps.

    Entry (i, j) is the similarity of token i's output at the later step
    with token j's output at the earlier step, so the diagonal tracks how
    much each token's own output moved.  Rows with near-zero norm map to 0.
    """
    if out_s.ndim != 2 or out_s1.ndim != 2 or out_s.shape != out_s1.shape:
        raise ShapeError(
            f"step outputs must share a (block, head_dim) shape: "
            f"{out_s.shape} vs {out_s1.shape}"
        )
    a = out_s1.astype(np.float64, copy=False)
    b = out_s.astype(np.float64, copy=False)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    sim = np.zeros_like(denom)
    ok = denom >= ZERO_NORM_EPS * ZERO_NORM_EPS
    np.divide(a @ b.T, denom, out=sim, where=ok)
    sim[na < ZERO_NORM_EPS, :] = 0.0
    sim[:, nb < ZERO_NORM_EPS] = 0.0
    return sim


class PartialRecorder:
    """Collects per-step external/internal partial outputs during a run.

    Keys are (layer, head, block); values are step-ordered lists of the
    normalized partial outputs.  Partials are stored by reference; the
    producing kernels never mutate them after the fact.
    """

    def __init__(self) -> None:
        self._external: dict[tuple[int, int, int], list[np.ndarray]] = {}
        self._internal: dict[tuple[int, int, int], list[np.ndarray]] = {}

    def record(self, layer, head, block_id, step, external, internal) -> None:
        key = (layer, head, block_id)
        self._external.setdefault(key, []).append(external.out)
        self._internal.setdefault(key, []).append(internal.out)

    def external_by_head(self):
        return self._external

    def internal_by_head(self):
        return self._internal


@dataclass
class StabilityRecord:
    """Diagonal-mean similarities for one (layer, head) adjacent-step pair."""

    layer: int
    head: int
    step: int  # index of the earlier step in the (step, step+1) pair
    mean_diag_out: float
    mean_diag_in: float


@dataclass
class StabilityResult:
    records: list[StabilityRecord]
    heatmaps_out: dict[tuple[int, int, int], np.ndarray]
    heatmaps_in: dict[tuple[int, int, int], np.ndarray]

    def empty(self) -> bool:
        return not self.records


def stability_study(
    model,
    steps: int,
    seed: int = 0,
    *,
    prompt_len: int = 64,
    block_size: int = 8,
    unmask_per_step: int = 1,
) -> StabilityResult:
    """Measure cross-step similarity of both partials over one block's denoising.

    Runs under always-recompute so the external and internal partials are
    both freshly computed at every step.  With fewer than two steps there
    are no adjacent pairs and the result is empty.
    """
    from .simulator import run_sequence

    if steps < 1:
        raise ValueError("steps must be >= 1")
    rec = PartialRecorder()
    run_sequence(
        model,
        prompt_len,
        1,
        block_size,
        steps,
        ReuseConfig(mode="always-recompute"),
        seed=seed,
        unmask_per_step=unmask_per_step,
        recorder=rec,
    )
    records: list[StabilityRecord] = []
    heat_out: dict[tuple[int, int, int], np.ndarray] = {}
    heat_in: dict[tuple[int, int, int], np.ndarray] = {}
    for (layer, head, _block), outs in sorted(rec.external_by_head().items()):
        ins = rec.internal_by_head()[(layer, head, _block)]
        for s in range(len(outs) - 1):
            m_out = pairwise_step_similarity(outs[s], outs[s + 1])
            m_in = pairwise_step_similarity(ins[s], ins[s + 1])
            heat_out[(layer, head, s)] = m_out
            heat_in[(layer, head, s)] = m_in
            records.append(
                StabilityRecord(
                    layer=layer,
                    head=head,
                    step=s,
                    mean_diag_out=float(np.mean(np.diag(m_out))),
                    mean_diag_in=float(np.mean(np.diag(m_in))),
                )
            )
    return StabilityResult(records=records, heatmaps_out=heat_out, heatmaps_in=heat_in)
