import numpy as np
import pytest

from ikod.kv_merge import (
    AnchorStrategy,
    anchor_count,
    build_buckets,
    build_merge_plan,
    layer_scores,
    merge_cache,
    select_anchors,
)
from ikod.model import (
    AttentionTrace,
    LayeredKvCache,
    ModelConfig,
    SequenceLayout,
    StepOutput,
    TinyDecoder,
    TraceError,
)
from ikod.numerics import Rng


def record_rows(trace: AttentionTrace, rows: np.ndarray) -> None:
    trace.record(StepOutput(logits=np.zeros(0), attention_rows=rows))


def test_layer_scores_head_mean():
    # Two image positions, one text token whose heads put 0.2 and 0.4 on them.
    layout = SequenceLayout.from_counts(2, 1, 0)
    trace = AttentionTrace(1, 2)
    record_rows(trace, np.full((1, 2, 1), 1.0))
    record_rows(trace, np.full((1, 2, 2), 0.5))
    text_row = np.array([[[0.15, 0.05, 0.8], [0.3, 0.1, 0.6]]])
    record_rows(trace, text_row)
    scores = layer_scores(trace, layout)
    assert scores.shape == (1, 1)
    assert scores[0, 0] == pytest.approx(0.3)


def test_layer_scores_single_head_passthrough():
    layout = SequenceLayout.from_counts(1, 1, 0)
    trace = AttentionTrace(1, 1)
    record_rows(trace, np.full((1, 1, 1), 1.0))
    record_rows(trace, np.array([[[0.7, 0.3]]]))
    assert layer_scores(trace, layout)[0, 0] == pytest.approx(0.7)


def test_layer_scores_saturate_when_attention_sits_on_the_image():
    layout = SequenceLayout.from_counts(3, 2, 0)
    trace = AttentionTrace(1, 2)
    for step in range(5):
        row = np.zeros((1, 2, step + 1))
        on_image = min(step + 1, 3)
        row[..., :on_image] = 1.0 / on_image
        record_rows(trace, row)
    scores = layer_scores(trace, layout)
    np.testing.assert_allclose(scores, 1.0, atol=1e-6)


def test_layer_scores_incomplete_trace():
    layout = SequenceLayout.from_counts(1, 2, 0)
    trace = AttentionTrace(1, 1)
    record_rows(trace, np.full((1, 1, 1), 1.0))
    with pytest.raises(TraceError):
        layer_scores(trace, layout)


def test_anchor_count_rounding():
    assert anchor_count(6, 0.5) == 2
    assert anchor_count(6, 1.0) == 4
    assert anchor_count(6, 0.01) == 1  # clamped to at least one anchor
    with pytest.raises(ValueError):
        anchor_count(2, 0.5)
    with pytest.raises(ValueError):
        anchor_count(6, 0.0)


def test_select_anchors_low_attention_hand_case():
    scores = np.array([[0.9, 0.1, 0.5, 0.3, 0.0, 0.0]])  # last two are protected
    assert select_anchors(scores, 0.5, AnchorStrategy.LOW_ATTENTION) == [[1, 3]]


def test_select_anchors_high_attention_hand_case():
    scores = np.array([[0.9, 0.1, 0.5, 0.3, 0.0, 0.0]])
    assert select_anchors(scores, 0.5, AnchorStrategy.HIGH_ATTENTION) == [[0, 2]]


def test_select_anchors_full_ratio_keeps_whole_domain():
    scores = np.random.default_rng(0).uniform(size=(2, 9))
    assert select_anchors(scores, 1.0) == [list(range(7)), list(range(7))]


def test_select_anchors_ties_break_to_lower_index():
    scores = np.zeros((1, 6))
    assert select_anchors(scores, 0.5, AnchorStrategy.LOW_ATTENTION) == [[0, 1]]
    assert select_anchors(scores, 0.5, AnchorStrategy.HIGH_ATTENTION) == [[0, 1]]


def test_select_anchors_random_is_seeded_and_without_replacement():
    scores = np.zeros((3, 20))
    a = select_anchors(scores, 0.4, AnchorStrategy.RANDOM, Rng(5))
    b = select_anchors(scores, 0.4, AnchorStrategy.RANDOM, Rng(5))
    assert a == b
    for layer in a:
        assert layer == sorted(set(layer))
        assert all(0 <= i <= 17 for i in layer)
    with pytest.raises(ValueError):
        select_anchors(scores, 0.4, AnchorStrategy.RANDOM)


def test_select_anchors_rejects_short_text():
    with pytest.raises(ValueError):
        select_anchors(np.zeros((1, 2)), 0.5)


def test_build_buckets_hand_case():
    assert build_buckets([2, 5, 7], 10) == [(0, 3), (4, 6), (7, 7)]


def test_build_buckets_single_anchor():
    assert build_buckets([0], 4) == [(0, 1)]


def test_build_buckets_consecutive_anchors_are_singletons():
    buckets = build_buckets(list(range(6)), 8)
    assert buckets == [(i, i) for i in range(6)]


def test_build_buckets_validation():
    with pytest.raises(ValueError):
        build_buckets([], 10)
    with pytest.raises(ValueError):
        build_buckets([3, 3], 10)
    with pytest.raises(ValueError):
        build_buckets([8], 10)  # 8 exceeds the mergeable range 0..7


def brute_nearest_anchor(anchors: list[int], text_len: int) -> list[list[int]]:
    """Assign each mergeable position to its closest anchor, ties to the left."""
    groups: dict[int, list[int]] = {a: [] for a in anchors}
    for pos in range(text_len - 2):
        best = min(anchors, key=lambda a: (abs(pos - a), a))
        groups[best].append(pos)
    return [groups[a] for a in anchors]


def test_buckets_match_nearest_anchor_oracle():
    rng = np.random.default_rng(42)
    for _ in range(200):
        text_len = int(rng.integers(3, 60))
        domain = text_len - 2
        k = int(rng.integers(1, domain + 1))
        anchors = sorted(rng.choice(domain, size=k, replace=False).tolist())
        buckets = build_buckets(anchors, text_len)
        expanded = [list(range(lo, hi + 1)) for lo, hi in buckets]
        assert expanded == brute_nearest_anchor(anchors, text_len)
        flat = [p for group in expanded for p in group]
        assert flat == list(range(domain))  # disjoint cover in order


def hand_cache() -> tuple[LayeredKvCache, SequenceLayout]:
    # One image row then five text rows with recognizable values.
    cache = LayeredKvCache(n_layers=1, n_heads=1, d_head=2, max_seq=8)
    rows = np.array(
        [[9.0, 9.0], [1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.0]]
    )
    cache.keys[0, 0, : len(rows)] = rows
    cache.values[0, 0, : len(rows)] = rows * 10.0
    cache.length = len(rows)
    return cache, SequenceLayout.from_counts(1, 5, 0)


def test_merge_cache_averages_bucket_rows():
    cache, layout = hand_cache()
    plan = build_merge_plan(np.array([[0.0, 0.5, 0.9, 0.0, 0.0]]), 0.4)
    assert plan.layers[0].anchors == (0,)
    assert plan.layers[0].buckets == ((0, 2),)
    merged = merge_cache(cache, plan, layout)
    assert merged.length == 4  # image + one bucket + two protected
    np.testing.assert_array_equal(merged.keys[0][0, 0], [9.0, 9.0])
    np.testing.assert_array_equal(merged.keys[0][0, 1], [3.0, 4.0])  # mean of three rows
    np.testing.assert_array_equal(merged.keys[0][0, 2:], [[7.0, 8.0], [9.0, 10.0]])
    np.testing.assert_array_equal(merged.values[0][0, 1], [30.0, 40.0])


def test_merge_cache_full_ratio_is_identity():
    cfg = ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, vocab_size=16, max_seq=16, seed=1)
    model = TinyDecoder(cfg)
    cache = model.new_cache()
    trace = AttentionTrace(2, 2)
    layout = SequenceLayout.from_counts(2, 4, 0)
    rng = np.random.default_rng(0)
    for _ in range(2):
        trace.record(model.forward_step(cache, rng.normal(size=8)))
    last = None
    for tok in (3, 5, 1, 7):
        out = model.forward_step(cache, tok)
        trace.record(out)
        last = out
    plan = build_merge_plan(layer_scores(trace, layout), 1.0)
    merged = merge_cache(cache, plan, layout)
    for li in range(2):
        np.testing.assert_array_equal(merged.keys[li], cache.layer_keys(li))
        np.testing.assert_array_equal(merged.values[li], cache.layer_values(li))
    logits, _ = model.forward_query(merged.keys, merged.values, cache.length - 1, 7)
    np.testing.assert_allclose(logits, last.logits, atol=1e-9, rtol=0)


def test_merge_cache_identical_rows_average_to_themselves():
    cache = LayeredKvCache(n_layers=1, n_heads=1, d_head=2, max_seq=8)
    cache.keys[0, 0, :5] = np.array([0.5, -0.25])
    cache.values[0, 0, :5] = np.array([1.5, 2.5])
    cache.length = 5
    layout = SequenceLayout.from_counts(0, 5, 0)
    plan = build_merge_plan(np.zeros((1, 5)), 0.4)
    merged = merge_cache(cache, plan, layout)
    np.testing.assert_array_equal(merged.keys[0][0, 0], [0.5, -0.25])


def test_merged_rows_stay_in_bucket_hull():
    rng = np.random.default_rng(9)
    cache = LayeredKvCache(n_layers=1, n_heads=2, d_head=4, max_seq=32)
    n = 20
    cache.keys[0, :, :n] = rng.normal(size=(2, n, 4))
    cache.values[0, :, :n] = rng.normal(size=(2, n, 4))
    cache.length = n
    layout = SequenceLayout.from_counts(4, 16, 0)
    plan = build_merge_plan(rng.uniform(size=(1, 16)), 0.3)
    merged = merge_cache(cache, plan, layout)
    for b, (lo, hi) in enumerate(plan.layers[0].buckets):
        rows = cache.keys[0, :, 4 + lo : 4 + hi + 1]
        got = merged.keys[0][:, 4 + b]
        assert np.all(got >= rows.min(axis=1) - 1e-12)
        assert np.all(got <= rows.max(axis=1) + 1e-12)


def test_compressed_length_grows_with_ratio():
    layout = SequenceLayout.from_counts(2, 30, 0)
    cache = LayeredKvCache(n_layers=1, n_heads=1, d_head=2, max_seq=64)
    cache.length = 32
    scores = np.random.default_rng(1).uniform(size=(1, 30))
    lengths = []
    for ratio in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        merged = merge_cache(cache, build_merge_plan(scores, ratio), layout)
        lengths.append(merged.length)
        assert merged.length == 2 + anchor_count(30, ratio) + 2
    assert lengths == sorted(lengths)
    assert all(a < b for a, b in zip(lengths, lengths[1:]))


def test_merge_cache_rejects_mismatched_layout():
    cache, layout = hand_cache()
    plan = build_merge_plan(np.zeros((1, 5)), 0.4)
    with pytest.raises(ValueError):
        merge_cache(cache, plan, SequenceLayout.from_counts(1, 4, 0))
    cache.length = 5
    with pytest.raises(ValueError):
        merge_cache(cache, plan, layout)


def test_merge_plan_json_shape():
    plan = build_merge_plan(np.array([[0.4, 0.2, 0.6, 0.0, 0.0]]), 0.4)
    doc = plan.to_json_dict()
    assert doc["layers"][0]["protected"] == [3, 4]
    assert doc["layers"][0]["anchors"] == [1]
    assert doc["layers"][0]["buckets"] == [[0, 2]]
    assert doc["strategy"] == "low_attention"
