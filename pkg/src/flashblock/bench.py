"""Sweep drivers: per-step counted work vs context length, and sparse-gap
accuracy vs density.  These produce the delimited rows the CLI writes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import ReuseConfig
from .simulator import ModelConfig, SyntheticModel, run_sequence
from .sparse import GapRow, measure_sparse_gap
from .util import thread_map

__all__ = ["SweepRow", "sweep_context", "sweep_density"]


@dataclass
class SweepRow:
    """One generated-block denoising step of one sweep cell."""

    context: int
    tau: int
    policy: str  # "reuse" | "dense"
    step: int
    keys_attended: float
    kv_rows_read: float
    wall_ns: int


def _policy_config(policy: str, tau: int) -> ReuseConfig:
    if policy == "reuse":
        return ReuseConfig(tau=tau)
    if policy == "dense":
        return ReuseConfig(tau=tau, mode="always-recompute")
    raise ValueError(f"unknown policy {policy!r}; expected 'reuse' or 'dense'")


def sweep_context(
    contexts: list[int],
    taus: list[int],
    policies: list[str],
    *,
    block_size: int = 8,
    steps_per_block: int = 32,
    seed: int = 0,
    model: SyntheticModel | None = None,
) -> list[SweepRow]:
    """Denoise one block at each committed-context length and record work.

    Each (context, tau, policy) cell is an independent run: the prompt fills
    the context, then a single block of ``block_size`` tokens is denoised
    over ``steps_per_block`` steps with one-token unmask events spread over
    the budget (refinement steps in between).  Rows are sorted by
    (context, tau, policy, step); ``wall_ns`` is informational only.
    """
    if model is None:
        model = SyntheticModel(ModelConfig(seed=seed))
    rows: list[SweepRow] = []
    for context in contexts:
        for tau in taus:
            for policy in policies:
                run = run_sequence(
                    model, context, 1, block_size, steps_per_block,
                    _policy_config(policy, tau), seed=seed, unmask_per_step=1,
                )
                for t in run.traces:
                    rows.append(
                        SweepRow(
                            context=context,
                            tau=tau,
                            policy=policy,
                            step=t.step,
                            keys_attended=t.keys_attended,
                            kv_rows_read=t.kv_rows_read,
                            wall_ns=t.wall_ns,
                        )
                    )
    rows.sort(key=lambda r: (r.context, r.tau, r.policy, r.step))
    return rows


def sweep_density(
    densities: list[float],
    num_seeds: int,
    *,
    layer: int = 0,
    base_seed: int = 0,
    prompt_len: int = 160,
    block_size: int = 8,
    key_block_size: int = 16,
    model: SyntheticModel | None = None,
    workers: int | None = None,
) -> list[GapRow]:
    """Sparse-gap measurement across seeds, parallelized per seed."""
    if model is None:
        model = SyntheticModel(ModelConfig(seed=base_seed))

    def one(seed: int) -> list[GapRow]:
        return measure_sparse_gap(
            model, list(densities), layer,
            seed=seed, prompt_len=prompt_len, block_size=block_size,
            key_block_size=key_block_size,
        )

    nested = thread_map(one, range(base_seed, base_seed + num_seeds), workers)
    rows = [row for batch in nested for row in batch]
    rows.sort(key=lambda r: (r.density, r.seed))
    return rows
