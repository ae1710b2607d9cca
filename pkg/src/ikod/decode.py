"""Generation strategies: base samplers, plausibility filtering, and the
dual-path loop that pairs full-cache decoding with a merged-cache view.

Per generated token the loop runs the ordinary incremental step on the
uncompressed cache, derives a merged cache from the attention recorded so
far, re-evaluates the same query (same content embedding, same position)
against that merged view, and combines the two probability vectors as
p_orig + alpha * p_aug restricted to tokens whose original probability is
at least beta times the original maximum. The merged view is rebuilt from
scratch each step and never mutates the live cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .kv_merge import AnchorStrategy, MergePlan, build_merge_plan, layer_scores, merge_cache
from .model import (
    AttentionTrace,
    CapacityError,
    LayeredKvCache,
    SequenceLayout,
    TinyDecoder,
)
from .numerics import Rng, ShapeError, softmax_rows

__all__ = [
    "EOS_TOKEN",
    "BaseStrategy",
    "DecodePolicy",
    "GenerationResult",
    "Mode",
    "Prompt",
    "StepDistributions",
    "base_select",
    "collaborative_combine",
    "ikod_generate",
    "plausibility_mask",
]

# Reserved end-of-sequence id; generation stops after emitting it.
EOS_TOKEN = 0


class Mode(str, Enum):
    BASELINE = "baseline"
    IKOD = "ikod"
    IKOD_NO_OD = "ikod_no_od"


@dataclass(frozen=True)
class BaseStrategy:
    """Base token-selection rule applied to the combined scores.

    kind is one of greedy | top_k | top_p; nucleus sampling is top_p with
    p = 1.0. A temperature, when set, raises the probabilities to 1/t and
    renormalizes before any truncation.
    """

    kind: str = "greedy"
    k: int | None = None
    p: float | None = None
    temperature: float | None = None

    def __post_init__(self):
        if self.kind not in ("greedy", "top_k", "top_p"):
            raise ValueError(f"unknown base strategy {self.kind!r}")
        if self.kind == "top_k" and (self.k is None or self.k < 1):
            raise ValueError("top_k needs k >= 1")
        if self.kind == "top_p" and (self.p is None or not 0.0 < self.p <= 1.0):
            raise ValueError("top_p needs p in (0, 1]")
        if self.kind == "greedy" and (self.k is not None or self.p is not None):
            raise ValueError("greedy takes no k or p")
        if self.temperature is not None and self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    @classmethod
    def greedy(cls) -> "BaseStrategy":
        return cls()

    @classmethod
    def top_k(cls, k: int, temperature: float | None = None) -> "BaseStrategy":
        return cls(kind="top_k", k=k, temperature=temperature)

    @classmethod
    def top_p(cls, p: float, temperature: float | None = None) -> "BaseStrategy":
        return cls(kind="top_p", p=p, temperature=temperature)

    @classmethod
    def nucleus(cls, temperature: float | None = None) -> "BaseStrategy":
        return cls(kind="top_p", p=1.0, temperature=temperature)


@dataclass(frozen=True)
class DecodePolicy:
    mode: Mode = Mode.IKOD
    base: BaseStrategy = field(default_factory=BaseStrategy)
    alpha: float = 2.0
    beta: float = 0.1
    anchor_ratio: float = 0.4
    anchor_strategy: AnchorStrategy = AnchorStrategy.LOW_ATTENTION
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "anchor_strategy", AnchorStrategy(self.anchor_strategy))
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if not 0.0 < self.anchor_ratio <= 1.0:
            raise ValueError("anchor_ratio must lie in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")

    def to_json_dict(self) -> dict:
        base = {"kind": self.base.kind}
        if self.base.k is not None:
            base["k"] = self.base.k
        if self.base.p is not None:
            base["p"] = self.base.p
        if self.base.temperature is not None:
            base["temperature"] = self.base.temperature
        return {
            "mode": self.mode.value,
            "base": base,
            "alpha": self.alpha,
            "beta": self.beta,
            "anchor_ratio": self.anchor_ratio,
            "anchor_strategy": self.anchor_strategy.value,
            "max_new_tokens": self.max_new_tokens,
            "seed": self.seed,
        }


def plausibility_mask(p_orig, beta: float) -> np.ndarray:
    """Boolean mask of tokens whose probability reaches beta times the max.

    beta = 0 keeps everything; beta = 1 keeps only argmax ties. The argmax is
    always kept.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    p = np.asarray(p_orig, dtype=np.float64)
    return p >= beta * p.max()


def collaborative_combine(p_orig, p_aug, alpha: float, v_head) -> np.ndarray:
    """p_orig + alpha * p_aug, zeroed outside the admissible set."""
    p_orig = np.asarray(p_orig, dtype=np.float64)
    p_aug = np.asarray(p_aug, dtype=np.float64)
    if p_orig.shape != p_aug.shape:
        raise ShapeError(f"distribution sizes differ: {p_orig.shape} vs {p_aug.shape}")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    return np.where(np.asarray(v_head, dtype=bool), p_orig + alpha * p_aug, 0.0)


def base_select(scores, base: BaseStrategy, rng: Rng) -> int:
    """Pick a token id from non-negative scores.

    Greedy takes the argmax (lowest index on ties). Sampling modes renormalize
    the scores, optionally temper them, truncate to the k largest or to the
    smallest prefix of descending sorted mass reaching p, renormalize again,
    and draw by inverse CDF from the seeded generator.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    total = s.sum()
    if total <= 0.0:
        raise ValueError("scores are all zero")
    if base.kind == "greedy":
        return int(np.argmax(s))
    probs = s / total
    if base.temperature is not None:
        # Dividing by the max first keeps the top entry at 1.0, so sharp
        # temperatures cannot underflow the whole vector to zero.
        probs = (probs / probs.max()) ** (1.0 / base.temperature)
        probs = probs / probs.sum()
    if base.kind == "top_k":
        k = min(base.k, probs.size)
        keep = np.argsort(-probs, kind="stable")[:k]
        mask = np.zeros(probs.size, dtype=bool)
        mask[keep] = True
        probs = np.where(mask, probs, 0.0)
    else:  # top_p
        order = np.argsort(-probs, kind="stable")
        csum = np.cumsum(probs[order])
        cut = int(np.searchsorted(csum, base.p, side="left"))
        keep = order[: min(cut, probs.size - 1) + 1]
        mask = np.zeros(probs.size, dtype=bool)
        mask[keep] = True
        probs = np.where(mask, probs, 0.0)
    probs = probs / probs.sum()
    u = rng.next_uniform()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    last_nonzero = int(np.flatnonzero(probs > 0.0)[-1])
    return min(idx, last_nonzero)


@dataclass(frozen=True)
class Prompt:
    """Synthetic image embeddings followed by instruction token ids."""

    image_embeddings: np.ndarray  # (n_image, d_model); zero rows allowed
    tokens: tuple[int, ...]


@dataclass
class StepDistributions:
    """Distributions behind one emitted token. p_aug and v_head are None when
    the merged path did not run (baseline mode)."""

    p_orig: np.ndarray
    p_aug: np.ndarray | None
    p_combined: np.ndarray
    v_head: np.ndarray | None
    chosen: int


@dataclass
class GenerationResult:
    tokens: list[int]
    trace: AttentionTrace
    steps: list[StepDistributions]
    layout: SequenceLayout
    cache: LayeredKvCache
    aug_image_attention: list[float]
    merge_plans: list[MergePlan] | None


def _softmax_vec(logits: np.ndarray) -> np.ndarray:
    return softmax_rows(logits[None, :])[0]


def ikod_generate(
    model: TinyDecoder,
    prompt: Prompt,
    policy: DecodePolicy,
    record_merge_plans: bool = False,
) -> GenerationResult:
    """Run the full generation loop under the given policy.

    Every emitted token (the final one and the end token included) is fed back
    through the incremental path, so the trace holds an attention row for each
    generated token and the cache is identical across modes for equal token
    sequences.
    """
    cfg = model.config
    images = np.asarray(prompt.image_embeddings, dtype=np.float64)
    if images.size == 0:
        images = images.reshape(0, cfg.d_model)
    if images.ndim != 2 or images.shape[1] != cfg.d_model:
        raise ValueError(f"image embeddings must have shape (n, {cfg.d_model})")
    n_image = images.shape[0]
    l_others = len(prompt.tokens)
    if l_others < 1:
        raise ValueError("prompt needs at least one text token")
    if policy.mode is not Mode.BASELINE and l_others < 3:
        raise ValueError("merged decoding needs at least three prompt text tokens")
    prefill = n_image + l_others
    if prefill + policy.max_new_tokens > cfg.max_seq:
        raise CapacityError(
            f"prompt of {prefill} plus {policy.max_new_tokens} new tokens exceeds "
            f"max_seq {cfg.max_seq}"
        )

    rng = Rng(policy.seed)
    cache = model.new_cache()
    trace = AttentionTrace(cfg.n_layers, cfg.n_heads)

    out = None
    for emb in images:
        out = model.forward_step(cache, emb)
        trace.record(out)
    current_input: int | np.ndarray = 0
    for tok in prompt.tokens:
        out = model.forward_step(cache, int(tok))
        trace.record(out)
        current_input = int(tok)

    generated: list[int] = []
    steps: list[StepDistributions] = []
    plans: list[MergePlan] | None = [] if record_merge_plans else None
    aug_att: list[float] = []

    for _ in range(policy.max_new_tokens):
        p_orig = _softmax_vec(out.logits)
        if policy.mode is Mode.BASELINE:
            p_aug = None
            v_head = None
            scores = p_orig
        else:
            layout = SequenceLayout.from_counts(n_image, l_others, len(generated))
            token_scores = layer_scores(trace, layout)
            plan = build_merge_plan(
                token_scores, policy.anchor_ratio, policy.anchor_strategy, rng
            )
            merged = merge_cache(cache, plan, layout)
            aug_logits, aug_rows = model.forward_query(
                merged.keys, merged.values, cache.length - 1, current_input
            )
            p_aug = _softmax_vec(aug_logits)
            v_head = plausibility_mask(p_orig, policy.beta)
            if policy.mode is Mode.IKOD:
                scores = collaborative_combine(p_orig, p_aug, policy.alpha, v_head)
            else:
                scores = np.where(v_head, p_aug, 0.0)
            aug_att.append(
                float(np.mean([r[:, : merged.image_len].sum(axis=1) for r in aug_rows]))
            )
            if plans is not None:
                plans.append(plan)
        token = base_select(scores, policy.base, rng)
        steps.append(
            StepDistributions(
                p_orig=p_orig, p_aug=p_aug, p_combined=scores, v_head=v_head, chosen=token
            )
        )
        generated.append(token)
        out = model.forward_step(cache, token)
        trace.record(out)
        current_input = token
        if token == EOS_TOKEN:
            break

    return GenerationResult(
        tokens=generated,
        trace=trace,
        steps=steps,
        layout=SequenceLayout.from_counts(n_image, l_others, len(generated)),
        cache=cache,
        aug_image_attention=aug_att,
        merge_plans=plans,
    )
