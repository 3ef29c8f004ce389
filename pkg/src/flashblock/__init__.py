"""Cached block-external attention for block diffusion, with verification.

Block-causal attention for a block being denoised splits exactly into a
block-external part (over committed context, frozen between steps) and a
block-internal part (over the block's own evolving keys).  This package
implements that decomposition with numerically stable log-space merging, a
counted key/value cache, a token-update-threshold reuse policy, a sparse
variant that caches the unselected keys' residual contribution, and a
deterministic synthetic diffusion model plus CLI for measuring all of it.
"""

from .analysis import PartialRecorder, StabilityRecord, StabilityResult, pairwise_step_similarity, stability_study
from .attention import (
    AttnPartial,
    CacheEntry,
    DegenerateInputError,
    ExternalAttnCache,
    ReusePreconditionError,
    attention_dense,
    attention_partial,
    attention_streamed,
    attention_with_reuse,
    combine_partials,
    merge_partials,
)
from .bench import SweepRow, sweep_context, sweep_density
from .kv_cache import AccessCounters, BoundsError, KvCache
from .linalg import ShapeError, as_matrix, cosine_similarity, matmul, softmax_rows
from .policy import (
    CalibrationError,
    Decision,
    HeadGate,
    HeadGateTable,
    ReuseConfig,
    calibrate_head_gates,
    count_updated_tokens,
    decide,
)
from .simulator import (
    MASK_TOKEN_ID,
    TRACE_CSV_HEADER,
    BlockState,
    ModelConfig,
    ProbeReport,
    RunResult,
    StepTrace,
    SyntheticModel,
    denoise_step,
    new_block_state,
    prefill,
    prompt_ids,
    quality_probe,
    run_sequence,
    trace_csv_lines,
    unmask_schedule,
)
from .sparse import (
    GapRow,
    SparseMask,
    StalenessError,
    build_sparse_mask,
    measure_sparse_gap,
    read_selected_rows,
    sparse_attention_with_residual,
)
from .verification import (
    PropertyResult,
    check_baseline_equivalence,
    check_decomposition,
    check_merge_associativity,
    check_no_kv_touch,
    check_shift_stability,
    run_all,
)

__version__ = "0.1.0"
