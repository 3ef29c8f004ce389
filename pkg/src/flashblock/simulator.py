"""Deterministic toy block-diffusion transformer that drives the attention
engine end to end.

The model is deliberately desk-scale: seeded Gaussian projection weights, a
few layers and heads, sinusoidal positions, greedy confidence-based
unmasking.  It exists to exercise the cache/reuse machinery under realistic
block-causal dynamics with countable work, not to model language.  Same seed
and config always give bitwise-identical weights, prompts and trajectories.

Generation proceeds block by block: the prompt is committed to the KvCache as
pre-filled blocks, then each new block starts fully masked and is denoised
over a fixed step budget.  Every step runs a full forward from the current
token ids; per (layer, head), attention is routed through the reuse policy,
either merging the cached external partial with a fresh internal one or
recomputing both from the cache.  When a block finishes, a dedicated commit
pass (no step conditioning) produces the K/V rows appended to the cache, and
all external partials are invalidated.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    ExternalAttnCache,
    attention_dense,
    attention_streamed,
    attention_with_reuse,
    merge_partials,
)
from .kv_cache import KvCache
from .linalg import softmax_rows
from .policy import Decision, HeadGateTable, ReuseConfig, count_updated_tokens, decide

__all__ = [
    "MASK_TOKEN_ID",
    "ModelConfig",
    "SyntheticModel",
    "BlockState",
    "StepTrace",
    "RunResult",
    "ProbeReport",
    "TRACE_CSV_HEADER",
    "unmask_schedule",
    "new_block_state",
    "prefill",
    "denoise_step",
    "run_sequence",
    "quality_probe",
    "trace_csv_lines",
]

MASK_TOKEN_ID = 0

# spawn_key tags for independent deterministic substreams
_PROMPT_TAG = 1
_KV_NOISE_TAG = 2
_QUERY_NOISE_TAG = 3


@dataclass(frozen=True)
class ModelConfig:
    """Synthetic model shape and determinism knobs.

    The noise fields are perturbation hooks for stability studies: they
    inject per-step pseudo-noise (seeded by layer/head/block/step, so still
    fully deterministic) into the in-block K/V projections or into selected
    heads' queries.  ``step_scale`` adds a small sinusoidal step-conditioning
    term to the block embeddings, so representations keep drifting between
    unmask events the way diffusion refinement does.
    """

    vocab_size: int = 256
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    seed: int = 0
    dtype: type = np.float64
    step_scale: float = 0.05
    internal_kv_noise: float = 0.0
    query_noise: float = 0.0
    noisy_heads: frozenset = frozenset()
    attn_tile_size: int = 512

    @property
    def d_model(self) -> int:
        return self.num_heads * self.head_dim


def _sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    """Classic interleaved sin/cos position code, one row per position."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    half = dim // 2
    freq = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    ang = pos * freq[None, :]
    out = np.zeros((pos.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _stream(seed: int, *spawn_key: int) -> np.random.Generator:
    """Counter-based (Philox) generator for an independent named substream."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=spawn_key))
    )


class SyntheticModel:
    """Seeded weights plus the forward primitives the drivers compose."""

    def __init__(self, config: ModelConfig | None = None, **overrides):
        if config is None:
            config = ModelConfig(**overrides)
        elif overrides:
            raise ValueError("pass either a config or overrides, not both")
        self.config = config
        cfg = config
        if cfg.d_model % 2 != 0:
            raise ValueError("d_model (num_heads * head_dim) must be even")
        dm, dh, L, H = cfg.d_model, cfg.head_dim, cfg.num_layers, cfg.num_heads
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
        s = 1.0 / math.sqrt(dm)
        dt = cfg.dtype
        self.embed = (rng.standard_normal((cfg.vocab_size, dm)) * s).astype(dt)
        self.wq = (rng.standard_normal((L, H, dm, dh)) * s).astype(dt)
        self.wk = (rng.standard_normal((L, H, dm, dh)) * s).astype(dt)
        self.wv = (rng.standard_normal((L, H, dm, dh)) * s).astype(dt)
        self.wo = (rng.standard_normal((L, dm, dm)) * s).astype(dt)
        self.wm = (rng.standard_normal((L, dm, dm)) * s).astype(dt)
        self.scale = 1.0 / math.sqrt(dh)

    # -- forward primitives ----------------------------------------------

    def hidden_from_ids(
        self, ids: np.ndarray, start_position: int, step: int | None
    ) -> np.ndarray:
        """Token embedding + position code (+ step conditioning when given)."""
        cfg = self.config
        n = ids.shape[0]
        positions = np.arange(start_position, start_position + n)
        x = self.embed[ids] + (
            _sinusoid(positions, cfg.d_model) / math.sqrt(cfg.d_model)
        ).astype(cfg.dtype)
        if step is not None and cfg.step_scale:
            term = _sinusoid(np.array([step]), cfg.d_model)[0] * cfg.step_scale
            x = x + term.astype(cfg.dtype)
        return x

    def norm(self, x: np.ndarray) -> np.ndarray:
        return x / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + 1e-8)

    def project(
        self,
        xn: np.ndarray,
        layer: int,
        head: int,
        *,
        block_id: int = 0,
        step: int | None = None,
    ):
        """Per-head q, k, v projections, with fixture noise when configured.

        Noise is only injected for denoise steps (``step`` given); commit
        passes stay noise-free so committed context is genuinely frozen.
        """
        cfg = self.config
        q = xn @ self.wq[layer, head]
        k = xn @ self.wk[layer, head]
        v = xn @ self.wv[layer, head]
        if step is not None:
            if cfg.internal_kv_noise:
                rng = _stream(cfg.seed, _KV_NOISE_TAG, block_id, step, layer, head)
                k = k + (rng.standard_normal(k.shape) * cfg.internal_kv_noise).astype(cfg.dtype)
                v = v + (rng.standard_normal(v.shape) * cfg.internal_kv_noise).astype(cfg.dtype)
            if cfg.query_noise and (layer, head) in cfg.noisy_heads:
                rng = _stream(cfg.seed, _QUERY_NOISE_TAG, block_id, step, layer, head)
                q = q + (rng.standard_normal(q.shape) * cfg.query_noise).astype(cfg.dtype)
        return q, k, v

    def mix(self, x: np.ndarray, layer: int) -> np.ndarray:
        """Cheap position-wise nonlinearity standing in for an MLP."""
        return x + 0.5 * np.tanh(x @ self.wm[layer])

    def logits(self, x: np.ndarray) -> np.ndarray:
        out = (x @ self.embed.T).astype(np.float64)
        out[:, MASK_TOKEN_ID] = -np.inf  # the mask token is never predicted
        return out


@dataclass
class BlockState:
    """Denoising state of the current block."""

    block_id: int
    start_position: int
    token_ids: np.ndarray
    step_index: int = 0
    prev_token_ids: np.ndarray | None = None

    @property
    def mask_positions(self) -> np.ndarray:
        return np.flatnonzero(self.token_ids == MASK_TOKEN_ID)

    @property
    def finished(self) -> bool:
        return self.mask_positions.size == 0


@dataclass
class StepTrace:
    """Per-diffusion-step record of decisions, counted work and checksums.

    ``keys_attended`` and ``kv_rows_read`` are per-(layer, head) key-row
    counts for this step's attention, including the block's own rows read
    from step-local buffers; they are floats only because head-gated runs
    can mix reuse and recompute across heads.  ``external_rows_read`` is the
    run-global KvCache key-read counter delta for the step (committed-context
    traffic only) and is not serialized to CSV.
    """

    block_id: int
    step: int
    decision: str  # FirstVisit | Recompute | Reuse
    updated_tokens: int
    keys_attended: float
    kv_rows_read: float
    checksum: float
    linf_gap: float | None = None
    external_rows_read: int = 0
    wall_ns: int = 0


TRACE_CSV_HEADER = "block_id,step,decision,M,keys_attended,kv_rows_read,checksum,linf_gap"


def _num(x) -> str:
    # repr() is the shortest string that round-trips the exact float value.
    return repr(float(x))


def trace_csv_lines(traces: list[StepTrace]) -> list[str]:
    """Serialize traces in the delimited schema (header + one row per step)."""
    lines = [TRACE_CSV_HEADER]
    for t in traces:
        gap = "" if t.linf_gap is None else _num(t.linf_gap)
        lines.append(
            f"{t.block_id},{t.step},{t.decision},{t.updated_tokens},"
            f"{_num(t.keys_attended)},{_num(t.kv_rows_read)},{_num(t.checksum)},{gap}"
        )
    return lines


def unmask_schedule(block_size: int, steps: int, per_step: int) -> list[int]:
    """Spread unmask events over the step budget; the final step force-unmasks
    any remainder so a block always finishes within budget.

    ``per_step`` is the number of tokens revealed per unmask event; with a
    budget longer than the event count, pure refinement steps (zero unmasks)
    are interleaved.  ``per_step=0`` is the refinement-only fixture: nothing
    unmasks until the forced final step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    counts = [0] * steps
    if per_step <= 0:
        counts[-1] = block_size
        return counts
    events = min(steps, math.ceil(block_size / per_step))
    done = 0
    fired = 0
    for s in range(steps):
        target = ((s + 1) * events) // steps
        if target > fired:
            take = min(per_step * (target - fired), block_size - done)
            counts[s] = take
            done += take
            fired = target
    counts[-1] += block_size - done
    return counts


def new_block_state(block_id: int, start_position: int, block_size: int) -> BlockState:
    return BlockState(
        block_id=block_id,
        start_position=start_position,
        token_ids=np.full(block_size, MASK_TOKEN_ID, dtype=np.int64),
    )


def _context_hidden(model: SyntheticModel, ids: np.ndarray, start_position: int, kv: KvCache):
    """Block-causal forward for a *finished* block (prefill or commit pass).

    No step conditioning and no fixture noise: the resulting K/V rows are
    the frozen representation of the block.  Reads of earlier context are
    counted, since this is real traffic.  Returns final hidden states plus
    the per-(layer, head) K/V rows to commit.
    """
    cfg = model.config
    committed = kv.committed_tokens
    x = model.hidden_from_ids(ids, start_position, step=None)
    k_rows = [[None] * cfg.num_heads for _ in range(cfg.num_layers)]
    v_rows = [[None] * cfg.num_heads for _ in range(cfg.num_layers)]
    for layer in range(cfg.num_layers):
        xn = model.norm(x)
        outs = []
        for head in range(cfg.num_heads):
            q, k_in, v_in = model.project(xn, layer, head, step=None)
            k_rows[layer][head] = k_in
            v_rows[layer][head] = v_in
            k_ext, v_ext = kv.read_range(layer, head, 0, committed)
            keys = np.concatenate([k_ext, k_in])
            values = np.concatenate([v_ext, v_in])
            outs.append(
                attention_dense(q, keys, values, model.scale).astype(cfg.dtype)
            )
        x = x + np.concatenate(outs, axis=1) @ model.wo[layer]
        x = model.mix(x, layer)
    return x, k_rows, v_rows


def commit_context_block(
    model: SyntheticModel, kv: KvCache, ids: np.ndarray, start_position: int
) -> None:
    """Run the commit pass for a finished block and append its K/V rows."""
    _, k_rows, v_rows = _context_hidden(model, ids, start_position, kv)
    for layer in range(model.config.num_layers):
        for head in range(model.config.num_heads):
            kv.commit_block(layer, head, k_rows[layer][head], v_rows[layer][head])


def prompt_ids(model: SyntheticModel, prompt_len: int, seed: int) -> np.ndarray:
    """Deterministic prompt: ids drawn uniformly from the non-mask vocabulary."""
    rng = _stream(seed, _PROMPT_TAG)
    return rng.integers(1, model.config.vocab_size, size=prompt_len).astype(np.int64)


def prefill(
    model: SyntheticModel, prompt: np.ndarray, block_size: int, kv: KvCache | None = None
) -> KvCache:
    """Commit the prompt to the cache in block_size chunks."""
    cfg = model.config
    if kv is None:
        kv = KvCache(cfg.num_layers, cfg.num_heads, cfg.head_dim, dtype=cfg.dtype)
    for start in range(0, prompt.shape[0], block_size):
        chunk = prompt[start : start + block_size]
        commit_context_block(model, kv, chunk, start)
    return kv


def denoise_step(
    model: SyntheticModel,
    state: BlockState,
    kv: KvCache,
    ext_cache: ExternalAttnCache,
    policy: ReuseConfig,
    *,
    gates: HeadGateTable | None = None,
    verify: bool = False,
    recorder=None,
    layer_probe=None,
    unmask_count: int = 1,
) -> tuple[BlockState, StepTrace]:
    """One denoising step of the current block.

    Runs a full forward from the current token ids, routing each (layer,
    head) attention through the policy.  Reuse merges the cached external
    partial with a freshly computed internal one and never touches the
    KvCache; recompute streams the full committed context, refreshes the
    cached external partial, and keeps it valid for subsequent steps.  With
    ``verify=True`` a dense-oracle shadow forward (uncounted reads) runs on
    the same inputs and the max-abs final-state gap is recorded.

    Returns the advanced state (ids updated by the greedy unmask rule) and
    the step trace.
    """
    cfg = model.config
    L, H = cfg.num_layers, cfg.num_heads
    block_len = state.token_ids.shape[0]
    committed = kv.committed_tokens
    first_visit = state.step_index == 0
    updated = (
        count_updated_tokens(state.prev_token_ids, state.token_ids)
        if state.prev_token_ids is not None
        else 0
    )

    before = kv.snapshot_counters()
    x = model.hidden_from_ids(state.token_ids, state.start_position, step=state.step_index)
    x_dense = x.copy() if verify else None
    total_keys = 0
    recomputed_any = False

    for layer in range(L):
        xn = model.norm(x)
        outs = []
        for head in range(H):
            q, k_in, v_in = model.project(
                xn, layer, head, block_id=state.block_id, step=state.step_index
            )
            if layer_probe is not None:
                layer_probe(layer, head, state.step_index, q, k_in, v_in)
            gate = True
            if policy.mode == "head-gated" and gates is not None:
                gate = gates.is_enabled(layer, head)
            choice = decide(
                policy, ext_cache.is_valid(layer, head), first_visit, updated, gate
            )
            if choice is Decision.REUSE:
                entry = ext_cache.get(layer, head)
                out, internal = attention_with_reuse(
                    q, entry, k_in, v_in, model.scale, cfg.attn_tile_size
                )
                external = entry.partial
                total_keys += block_len
            else:
                recomputed_any = True
                k_ext, v_ext = kv.read_range(layer, head, 0, committed)
                keys = np.concatenate([k_ext, k_in])
                values = np.concatenate([v_ext, v_in])
                external, internal = attention_streamed(
                    q, keys, values, committed, model.scale, cfg.attn_tile_size
                )
                out = merge_partials(external, internal)
                ext_cache.put(
                    layer, head, external, step=state.step_index, block_id=state.block_id
                )
                total_keys += committed + block_len
            if recorder is not None:
                recorder.record(
                    layer, head, state.block_id, state.step_index, external, internal
                )
            outs.append(out)
        x = x + np.concatenate(outs, axis=1) @ model.wo[layer]
        x = model.mix(x, layer)

        if verify:
            xn_d = model.norm(x_dense)
            dense_outs = []
            for head in range(H):
                qd, kd, vd = model.project(
                    xn_d, layer, head, block_id=state.block_id, step=state.step_index
                )
                k_ext, v_ext = kv.peek_range(layer, head, 0, committed)
                dense_outs.append(
                    attention_dense(
                        qd,
                        np.concatenate([k_ext, kd]),
                        np.concatenate([v_ext, vd]),
                        model.scale,
                    ).astype(cfg.dtype)
                )
            x_dense = x_dense + np.concatenate(dense_outs, axis=1) @ model.wo[layer]
            x_dense = model.mix(x_dense, layer)

    after = kv.snapshot_counters()
    external_reads = after.key_rows_read - before.key_rows_read
    gap = float(np.max(np.abs(x - x_dense))) if verify else None

    new_ids = state.token_ids.copy()
    masked = state.mask_positions
    if unmask_count > 0 and masked.size > 0:
        probs = softmax_rows(model.logits(x))
        conf = probs[masked].max(axis=1)
        order = np.argsort(-conf, kind="stable")  # stable: position breaks ties
        chosen = masked[order[: min(unmask_count, masked.size)]]
        new_ids[chosen] = np.argmax(probs[chosen], axis=1)

    if first_visit:
        label = "FirstVisit"
    elif recomputed_any:
        label = "Recompute"
    else:
        label = "Reuse"
    per_pair = L * H
    trace = StepTrace(
        block_id=state.block_id,
        step=state.step_index,
        decision=label,
        updated_tokens=updated,
        keys_attended=total_keys / per_pair,
        kv_rows_read=(external_reads / per_pair) + block_len,
        checksum=float(x.sum(dtype=np.float64)),
        linf_gap=gap,
        external_rows_read=external_reads,
    )
    new_state = BlockState(
        block_id=state.block_id,
        start_position=state.start_position,
        token_ids=new_ids,
        step_index=state.step_index + 1,
        prev_token_ids=state.token_ids.copy(),
    )
    return new_state, trace


@dataclass
class RunResult:
    traces: list[StepTrace]
    final_ids: np.ndarray
    kv: KvCache
    ext_cache: ExternalAttnCache


def run_sequence(
    model: SyntheticModel,
    prompt_len: int,
    num_blocks: int,
    block_size: int,
    steps_per_block: int,
    policy: ReuseConfig,
    verify: bool = False,
    seed: int = 0,
    *,
    gates: HeadGateTable | None = None,
    unmask_per_step: int = 1,
    recorder=None,
    layer_probe=None,
) -> RunResult:
    """Prefill a seeded prompt, then denoise and commit ``num_blocks`` blocks.

    Fully deterministic given (model, seed, arguments); ``wall_ns`` on the
    traces is the only field exempt from that guarantee.
    """
    if num_blocks < 0 or prompt_len < 0:
        raise ValueError("prompt_len and num_blocks must be >= 0")
    if num_blocks > 0 and block_size < 1:
        raise ValueError("block_size must be >= 1")
    cfg = model.config
    prompt = prompt_ids(model, prompt_len, seed)
    kv = KvCache(cfg.num_layers, cfg.num_heads, cfg.head_dim, dtype=cfg.dtype)
    prefill(model, prompt, block_size if block_size >= 1 else max(1, prompt_len), kv)
    ext_cache = ExternalAttnCache()
    traces: list[StepTrace] = []
    pieces = [prompt]

    for block_id in range(num_blocks):
        state = new_block_state(block_id, prompt_len + block_id * block_size, block_size)
        for count in unmask_schedule(block_size, steps_per_block, unmask_per_step):
            t0 = time.perf_counter_ns()
            state, trace = denoise_step(
                model,
                state,
                kv,
                ext_cache,
                policy,
                gates=gates,
                verify=verify,
                recorder=recorder,
                layer_probe=layer_probe,
                unmask_count=count,
            )
            trace.wall_ns = time.perf_counter_ns() - t0
            traces.append(trace)
        assert state.finished, "unmask schedule must finish the block in budget"
        commit_context_block(model, kv, state.token_ids, state.start_position)
        ext_cache.invalidate_all()
        pieces.append(state.token_ids)

    return RunResult(
        traces=traces,
        final_ids=np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64),
        kv=kv,
        ext_cache=ext_cache,
    )


@dataclass
class ProbeReport:
    """Output-quality comparison between two policies over seeded runs."""

    match_fraction: float
    mean_linf_gap_a: float
    mean_linf_gap_b: float
    m_histogram: dict[int, int]
    seeds: int


def quality_probe(
    model: SyntheticModel,
    policy_a: ReuseConfig,
    policy_b: ReuseConfig,
    num_seeds: int,
    *,
    prompt_len: int = 32,
    num_blocks: int = 2,
    block_size: int = 8,
    steps_per_block: int | None = None,
    unmask_per_step: int = 2,
    base_seed: int = 0,
    workers: int | None = None,
) -> ProbeReport:
    """Run both policies over ``num_seeds`` prompts and compare final ids.

    Reports the exact-match fraction, the mean per-step dense-oracle gap of
    each policy, and the histogram of per-step updated-token counts M under
    policy_b.
    """
    from .util import thread_map

    if num_seeds < 1:
        raise ValueError("num_seeds must be >= 1")
    if steps_per_block is None:
        steps_per_block = math.ceil(block_size / max(1, unmask_per_step))

    def one(seed: int):
        ra = run_sequence(
            model, prompt_len, num_blocks, block_size, steps_per_block, policy_a,
            verify=True, seed=seed, unmask_per_step=unmask_per_step,
        )
        rb = run_sequence(
            model, prompt_len, num_blocks, block_size, steps_per_block, policy_b,
            verify=True, seed=seed, unmask_per_step=unmask_per_step,
        )
        gaps_a = [t.linf_gap for t in ra.traces]
        gaps_b = [t.linf_gap for t in rb.traces]
        ms = [t.updated_tokens for t in rb.traces]
        return bool(np.array_equal(ra.final_ids, rb.final_ids)), gaps_a, gaps_b, ms

    results = thread_map(one, range(base_seed, base_seed + num_seeds), workers)
    matches = [r[0] for r in results]
    gaps_a = [g for r in results for g in r[1]]
    gaps_b = [g for r in results for g in r[2]]
    hist: dict[int, int] = {}
    for r in results:
        for m in r[3]:
            hist[m] = hist.get(m, 0) + 1
    return ProbeReport(
        match_fraction=float(np.mean(matches)),
        mean_linf_gap_a=float(np.mean(gaps_a)) if gaps_a else 0.0,
        mean_linf_gap_b=float(np.mean(gaps_b)) if gaps_b else 0.0,
        m_histogram=dict(sorted(hist.items())),
        seeds=num_seeds,
    )
