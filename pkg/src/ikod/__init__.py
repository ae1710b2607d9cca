"""Attention-guided KV merging and collaborative decoding on a seeded toy
multimodal decoder, with the matching analytic cost model and hallucination
metrics."""

from .attn_analysis import (
    ImageAttentionStat,
    SegmentSummary,
    degradation_report,
    image_attention,
    kde2d,
    segment_averages,
    synthetic_uniform_trace,
    uniform_attention_prediction,
)
from .cost import (
    compressed_len,
    growth_rate_closed_form,
    growth_rate_exact,
    ikod_flops,
    original_flops,
)
from .decode import (
    EOS_TOKEN,
    BaseStrategy,
    DecodePolicy,
    GenerationResult,
    Mode,
    Prompt,
    StepDistributions,
    base_select,
    collaborative_combine,
    ikod_generate,
    plausibility_mask,
)
from .kv_merge import (
    AnchorStrategy,
    CompressedCache,
    MergePlan,
    build_buckets,
    build_merge_plan,
    layer_scores,
    merge_cache,
    select_anchors,
)
from .metrics import BinaryMetrics, BinaryOutcomes, CaptionRecord, binary_metrics, chair_scores
from .model import (
    AttentionTrace,
    CapacityError,
    ConfigError,
    LayeredKvCache,
    ModelConfig,
    Role,
    SequenceLayout,
    TinyDecoder,
    load_checkpoint,
    make_image_embeddings,
    save_checkpoint,
)
from .numerics import Matrix, Rng, ShapeError, matmul, softmax_rows

__version__ = "0.1.0"
