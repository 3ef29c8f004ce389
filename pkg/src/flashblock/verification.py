"""Randomized invariant suite pairing each optimized path with its oracle.

Each check returns a :class:`PropertyResult` with the observed worst-case
error, so callers (the CLI and the acceptance tests) can print one pass/fail
line per property with real numbers attached.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import attention_dense, attention_partial, attention_streamed, combine_partials, merge_partials
from .policy import ReuseConfig
from .simulator import ModelConfig, SyntheticModel, run_sequence

__all__ = [
    "PropertyResult",
    "check_decomposition",
    "check_merge_associativity",
    "check_shift_stability",
    "check_no_kv_touch",
    "check_baseline_equivalence",
    "run_all",
]

HEAD_DIMS = (8, 16, 32)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    max_err: float
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<28} max_err={self.max_err:.3e}  {self.detail}"


def _random_instance(rng: np.random.Generator, max_n: int):
    """One random attention problem: shapes, boundary and 64-bit tensors."""
    n = int(rng.integers(8, max_n + 1))
    d = int(rng.choice(HEAD_DIMS))
    nq = int(rng.integers(1, 9))
    boundary = int(rng.integers(0, n + 1))
    q = rng.standard_normal((nq, d))
    k = rng.standard_normal((n, d))
    v = rng.standard_normal((n, d))
    return q, k, v, boundary


def check_decomposition(
    trials: int,
    seed: int,
    *,
    max_n: int = 512,
    tol64: float = 1e-10,
    tol32: float = 1e-3,
) -> PropertyResult:
    """Streamed-split-then-merge must equal dense attention at every boundary.

    Each trial samples a layer/head grid (1-4 x 1-4) of independent problems
    with random sizes and a random boundary; both precisions run against the
    64-bit dense oracle.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    err64 = 0.0
    err32 = 0.0
    problems = 0
    for _ in range(trials):
        layers = int(rng.integers(1, 5))
        heads = int(rng.integers(1, 5))
        q, k, v, boundary = _random_instance(rng, max_n)
        for _ in range(layers * heads):
            # fresh tensors per (layer, head) cell, same shape/boundary
            q = rng.standard_normal(q.shape)
            k = rng.standard_normal(k.shape)
            v = rng.standard_normal(v.shape)
            ref = attention_dense(q, k, v)
            ext, inn = attention_streamed(q, k, v, boundary)
            err64 = max(err64, float(np.max(np.abs(merge_partials(ext, inn) - ref))))
            q32, k32, v32 = (a.astype(np.float32) for a in (q, k, v))
            ext32, inn32 = attention_streamed(q32, k32, v32, boundary)
            err32 = max(err32, float(np.max(np.abs(merge_partials(ext32, inn32) - ref))))
            problems += 1
    passed = err64 < tol64 and err32 < tol32
    return PropertyResult(
        "decomposition-exactness",
        passed,
        err64,
        f"float32_err={err32:.3e} ({problems} problems, {trials} instances)",
    )


def check_merge_associativity(trials: int, seed: int, tol: float = 1e-10) -> PropertyResult:
    """Three-way splits must merge identically in any association order."""
    rng = np.random.Generator(np.random.Philox(seed + 1))
    worst = 0.0
    for _ in range(trials):
        q, k, v, _ = _random_instance(rng, 128)
        n = k.shape[0]
        cut1 = int(rng.integers(0, n + 1))
        cut2 = int(rng.integers(cut1, n + 1))
        e1 = attention_partial(q, k[:cut1], v[:cut1])
        e2 = attention_partial(q, k[cut1:cut2], v[cut1:cut2])
        e3 = attention_partial(q, k[cut2:], v[cut2:])
        left = combine_partials(combine_partials(e1, e2), e3)
        right = combine_partials(e1, combine_partials(e2, e3))
        worst = max(worst, float(np.max(np.abs(left.out - right.out))))
        worst = max(worst, float(np.max(np.abs(left.out - attention_dense(q, k, v)))))
    return PropertyResult(
        "merge-associativity", worst < tol, worst, f"({trials} random 3-way splits)"
    )


def check_shift_stability(trials: int, seed: int, tol: float = 1e-6) -> PropertyResult:
    """A +80 shift on every attention score must not move the 32-bit output.

    Inputs are drawn on a binary lattice (multiples of 1/64, head_dim 16,
    scale 1/4) so that both the raw and the shifted scores are exactly
    representable in float32; any output difference is then attributable to
    the kernel's handling of the shift rather than to rounding of the shift
    itself.  Max subtraction should absorb the offset completely.
    """
    rng = np.random.Generator(np.random.Philox(seed + 2))
    d = 16
    scale = 0.25
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(8, 129))
        nq = int(rng.integers(1, 9))
        boundary = int(rng.integers(0, n + 1))
        q = (rng.integers(-128, 129, size=(nq, d)) / 64.0).astype(np.float32)
        k = (rng.integers(-128, 129, size=(n, d)) / 64.0).astype(np.float32)
        v = rng.standard_normal((n, d)).astype(np.float32)
        ones = np.ones((n, 1), dtype=np.float32)
        k_aug = np.hstack([k, ones])
        # extra query column c contributes c * 1 * scale to every score
        out = {}
        for name, c in (("base", 0.0), ("shifted", 320.0)):  # 320 * 0.25 = +80
            q_aug = np.hstack([q, np.full((nq, 1), c, dtype=np.float32)])
            ext, inn = attention_streamed(q_aug, k_aug, v, boundary, scale=scale)
            out[name] = merge_partials(ext, inn)
        worst = max(worst, float(np.max(np.abs(out["base"] - out["shifted"]))))
    return PropertyResult(
        "shift-stability", worst < tol, worst, f"(+80 score offset, {trials} trials)"
    )


def check_no_kv_touch(
    *,
    seed: int = 0,
    layers: int = 4,
    heads: int = 4,
    head_dim: int = 16,
    blocks: int = 2,
    block_size: int = 8,
    tau: int = 2,
    prompt_len: int = 64,
) -> PropertyResult:
    """Every Reuse step must show a zero committed-cache read delta.

    Also checks that reuse-step attended keys equal the block size exactly.
    """
    if blocks == 0:
        return PropertyResult(
            "no-kv-touch", True, 0.0, "(no generated blocks; empty trace)"
        )
    model = SyntheticModel(
        ModelConfig(num_layers=layers, num_heads=heads, head_dim=head_dim, seed=seed)
    )
    run = run_sequence(
        model, prompt_len, blocks, block_size, block_size,
        ReuseConfig(tau=tau), seed=seed, unmask_per_step=1,
    )
    reuse = [t for t in run.traces if t.decision == "Reuse"]
    bad_reads = max((t.external_rows_read for t in reuse), default=0)
    bad_keys = max((abs(t.keys_attended - block_size) for t in reuse), default=0.0)
    passed = bad_reads == 0 and bad_keys == 0 and len(reuse) > 0
    return PropertyResult(
        "no-kv-touch",
        passed,
        float(bad_reads),
        f"({len(reuse)} reuse steps; keys_attended dev={bad_keys:g})",
    )


def check_baseline_equivalence(
    *,
    seed: int = 0,
    layers: int = 4,
    heads: int = 4,
    head_dim: int = 16,
    blocks: int = 1,
    block_size: int = 8,
    prompt_len: int = 64,
    tol: float = 1e-10,
) -> PropertyResult:
    """Always-recompute through the streamed/merge path must match the dense
    oracle at every step."""
    if blocks == 0:
        return PropertyResult(
            "baseline-equivalence", True, 0.0, "(no generated blocks; empty trace)"
        )
    model = SyntheticModel(
        ModelConfig(num_layers=layers, num_heads=heads, head_dim=head_dim, seed=seed)
    )
    run = run_sequence(
        model, prompt_len, blocks, block_size, block_size,
        ReuseConfig(mode="always-recompute"), verify=True, seed=seed,
    )
    worst = max(t.linf_gap for t in run.traces)
    return PropertyResult(
        "baseline-equivalence", worst < tol, worst, f"({len(run.traces)} verified steps)"
    )


def run_all(
    *,
    seed: int = 0,
    trials: int = 200,
    layers: int = 4,
    heads: int = 4,
    head_dim: int = 16,
    blocks: int = 2,
    block_size: int = 8,
    tau: int = 2,
    max_n: int = 256,
) -> list[PropertyResult]:
    """The full invariant suite at CLI-friendly sizes."""
    return [
        check_decomposition(max(1, trials // 8), seed, max_n=max_n),
        check_merge_associativity(trials, seed),
        check_shift_stability(max(1, trials // 4), seed),
        check_no_kv_touch(
            seed=seed, layers=layers, heads=heads, head_dim=head_dim,
            blocks=blocks, block_size=block_size, tau=tau,
        ),
        check_baseline_equivalence(
            seed=seed, layers=layers, heads=heads, head_dim=head_dim,
            blocks=min(1, blocks), block_size=block_size,
        ),
    ]
