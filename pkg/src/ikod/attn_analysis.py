"""Image-attention statistics, the uniform-mix prediction, and 2-d Gaussian KDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AttentionTrace, Role, SequenceLayout, StepOutput, TraceError

__all__ = [
    "ImageAttentionStat",
    "SegmentSummary",
    "degradation_report",
    "image_attention",
    "kde2d",
    "segment_averages",
    "synthetic_uniform_trace",
    "trace_image_attention",
    "uniform_attention_prediction",
]


def image_attention(att_row, layout: SequenceLayout) -> float:
    """Attention mass a query row places on image positions.

    The row covers a leading prefix of the layout (the cached positions at
    that step), so it may be shorter than the full layout but never longer.
    """
    row = np.asarray(att_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("attention row must be one-dimensional")
    if row.size > len(layout):
        raise ValueError(f"row of length {row.size} exceeds layout of {len(layout)}")
    return float(row[layout.image_mask[: row.size]].sum())


@dataclass
class ImageAttentionStat:
    """Per recorded step, per layer, per head: attention mass on image tokens."""

    values: np.ndarray  # (n_steps, n_layers, n_heads)
    generated: np.ndarray  # (n_steps,) True where the step's query is a generated token

    @classmethod
    def from_trace(cls, trace: AttentionTrace, layout: SequenceLayout) -> "ImageAttentionStat":
        n = len(trace)
        if n > len(layout):
            raise ValueError("trace is longer than the layout")
        values = np.empty((n, trace.n_layers, trace.n_heads))
        for step in range(n):
            rows = trace.rows_for(step)
            values[step] = rows[..., layout.image_mask[: step + 1]].sum(axis=-1)
        generated = np.asarray(layout.roles[:n] == Role.GENERATED)
        return cls(values=values, generated=generated)

    @property
    def att_avg(self) -> np.ndarray:
        """Per-step mean over all layer/head cells."""
        return self.values.mean(axis=(1, 2))


@dataclass(frozen=True)
class SegmentSummary:
    att_first: float
    att_last: float
    segment_len: int


def segment_averages(stat: ImageAttentionStat, layer: int, head: int) -> SegmentSummary:
    """Mean image attention over the first and last 20% of generated steps.

    The window is floor(0.2 * L) steps, so at least five generated tokens are
    required for it to be non-empty.
    """
    series = stat.values[stat.generated, layer, head]
    n = series.size
    if n < 5:
        raise ValueError(f"segments undefined for {n} generated tokens (need >= 5)")
    w = n // 5  # floor(0.2 * n)
    return SegmentSummary(
        att_first=float(series[:w].mean()),
        att_last=float(series[-w:].mean()),
        segment_len=w,
    )


def uniform_attention_prediction(l_image: int, l_others: int, l_gen: int) -> float:
    """Image share of a perfectly uniform attention row: the image token count
    over the total sequence length. Fixed image/instruction lengths make this
    strictly decreasing in the generated length."""
    if min(l_image, l_others, l_gen) < 0:
        raise ValueError("lengths must be non-negative")
    total = l_image + l_others + l_gen
    if total <= 0:
        raise ValueError("total length must be positive")
    return l_image / total


def kde2d(points, grid, h_x: float = 0.5, h_y: float = 0.5) -> np.ndarray:
    """Gaussian-kernel density of 2-d points evaluated at the grid locations.

    density(g) = 1/(n*h_x*h_y) * sum_i exp(-0.5*(u^2 + v^2)) / (2*pi) with
    u = (g_x - x_i)/h_x, v = (g_y - y_i)/h_y.
    """
    pts = np.asarray(points, dtype=np.float64)
    g = np.asarray(grid, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    if g.ndim != 2 or g.shape[1] != 2:
        raise ValueError("grid must have shape (m, 2)")
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    if h_x <= 0 or h_y <= 0:
        raise ValueError("bandwidths must be positive")
    u = (g[:, None, 0] - pts[None, :, 0]) / h_x
    v = (g[:, None, 1] - pts[None, :, 1]) / h_y
    kern = np.exp(-0.5 * (u * u + v * v)) / (2.0 * np.pi)
    return kern.sum(axis=1) / (pts.shape[0] * h_x * h_y)


def degradation_report(trace: AttentionTrace, layout: SequenceLayout) -> list[tuple[float, float]]:
    """(relative position, mean image attention) per generated token.

    Relative position is t/L with 1-based t over the L generated tokens, so
    the last generated token sits at 1.0.
    """
    if layout.l_gen < 1:
        raise ValueError("need at least one generated token")
    if len(trace) < len(layout):
        raise TraceError("trace does not cover every layout position")
    stat = ImageAttentionStat.from_trace(trace, layout)
    att = stat.att_avg[stat.generated]
    n = att.size
    return [((t + 1) / n, float(att[t])) for t in range(n)]


def trace_image_attention(
    trace: AttentionTrace, layout: SequenceLayout
) -> list[tuple[int, int, int, float]]:
    """Flat (step, layer, head, att_image) rows for the whole trace."""
    stat = ImageAttentionStat.from_trace(trace, layout)
    n_steps, n_layers, n_heads = stat.values.shape
    return [
        (s, li, h, float(stat.values[s, li, h]))
        for s in range(n_steps)
        for li in range(n_layers)
        for h in range(n_heads)
    ]


def synthetic_uniform_trace(
    l_image: int, l_others: int, l_gen: int, n_layers: int = 1, n_heads: int = 1
) -> tuple[AttentionTrace, SequenceLayout]:
    """Trace whose every query attends uniformly over the cached positions;
    its measured image attention matches the uniform-mix prediction exactly."""
    layout = SequenceLayout.from_counts(l_image, l_others, l_gen)
    trace = AttentionTrace(n_layers, n_heads)
    for step in range(len(layout)):
        row = np.full((n_layers, n_heads, step + 1), 1.0 / (step + 1))
        trace.record(StepOutput(logits=np.zeros(0), attention_rows=row))
    return trace, layout
