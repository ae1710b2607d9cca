"""Analytic decode cost model: per-pass FLOPs and the added-cost ratio of the
dual-path strategy.

A single forward pass over a length-n sequence costs L * (24*n*d^2 + 4*n^2*d)
FLOPs (attention and feed-forward only). The merged second pass runs over the
shortened length n_hat = n + (lam - 1) * l, so its relative cost g is below 1
whenever any text is actually merged.

Python integers never overflow, so integer inputs give exact counts; float
inputs propagate floats.
"""

from __future__ import annotations

import math

__all__ = [
    "compressed_len",
    "growth_rate_closed_form",
    "growth_rate_exact",
    "ikod_flops",
    "original_flops",
]


def _check_positive(**kwargs) -> None:
    for name, value in kwargs.items():
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")


def original_flops(n_layers, seq_len, hidden):
    """FLOPs of one full-cache pass: L * (24*n*d^2 + 4*n^2*d)."""
    _check_positive(n_layers=n_layers, seq_len=seq_len, hidden=hidden)
    return n_layers * (24 * seq_len * hidden**2 + 4 * seq_len**2 * hidden)


def compressed_len(seq_len, text_len, anchor_ratio, integer: bool = False):
    """Sequence length after merging: n + (lam - 1) * l.

    With integer=True the text remainder is rounded the way the merge does
    (floor(lam * (l - 2)) anchors, at least 1, plus the 2 protected rows), so
    the result never drops below seq_len - text_len + 3.
    """
    if text_len > seq_len:
        raise ValueError(f"text length {text_len} exceeds sequence length {seq_len}")
    if not 0.0 < anchor_ratio <= 1.0:
        raise ValueError("anchor_ratio must lie in (0, 1]")
    _check_positive(seq_len=seq_len, text_len=text_len)
    if integer:
        if text_len < 3:
            raise ValueError("integer rounding needs a text length of at least 3")
        kept = max(1, math.floor(anchor_ratio * (text_len - 2)))
        return (seq_len - text_len) + kept + 2
    return seq_len + (anchor_ratio - 1.0) * text_len


def ikod_flops(n_layers, seq_len, hidden, text_len, anchor_ratio):
    """Total FLOPs of the dual-path step: the original pass plus the pass over
    the merged length."""
    n_hat = compressed_len(seq_len, text_len, anchor_ratio)
    return original_flops(n_layers, seq_len, hidden) + n_layers * (
        24 * n_hat * hidden**2 + 4 * n_hat**2 * hidden
    )


def growth_rate_exact(n_layers, seq_len, hidden, text_len, anchor_ratio):
    """Added cost relative to the original pass: total/original - 1."""
    total = ikod_flops(n_layers, seq_len, hidden, text_len, anchor_ratio)
    return total / original_flops(n_layers, seq_len, hidden) - 1.0


def growth_rate_closed_form(seq_len, hidden, text_len, anchor_ratio):
    """Closed form of the added-cost ratio.

    With c = (1 - lam) * l the ratio simplifies to
    1 - c * (2n - c + 6d) / (6nd + n^2), obtained by expanding the quadratic
    in the shortened length and dividing through by 4d.
    """
    if text_len > seq_len:
        raise ValueError(f"text length {text_len} exceeds sequence length {seq_len}")
    if not 0.0 < anchor_ratio <= 1.0:
        raise ValueError("anchor_ratio must lie in (0, 1]")
    _check_positive(seq_len=seq_len, hidden=hidden, text_len=text_len)
    c = (1.0 - anchor_ratio) * text_len
    return 1.0 - c * (2 * seq_len - c + 6 * hidden) / (6 * seq_len * hidden + seq_len**2)
