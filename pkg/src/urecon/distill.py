"""Spatial attention maps and the attention-transfer distillation loss.

The attention map of an activation collapses channels to a nonnegative
spatial energy map, O[i, j] = sum_c h[c, i, j]^2.  The per-cascade loss is
the L1 distance between the L2-normalized (flattened) teacher and student
maps, so it is invariant to positive rescaling of either activation and
bounded by 2.  The total loss sums over cascades.
"""

from __future__ import annotations

import logging

import torch

logger = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


def attention_map(h):
    """(..., C, H, W) activation -> (..., H, W) nonnegative spatial map."""
    h = torch.as_tensor(h)
    if h.ndim < 3 or h.shape[-3] < 1:
        raise ValueError(f"expected (..., C, H, W) activation, got shape {tuple(h.shape)}")
    return (h * h).sum(dim=-3)


def at_loss_cascade(teacher_map, student_map):
    """L1 distance between unit-L2-normalized attention maps, averaged over any batch dims.

    A map with (near-)zero norm normalizes to the zero vector; such degenerate
    batches are logged and contribute the norm of the other map's unit vector.
    """
    t = torch.as_tensor(teacher_map)
    s = torch.as_tensor(student_map)
    if t.shape != s.shape:
        raise ValueError(f"attention maps differ in shape: {tuple(t.shape)} vs {tuple(s.shape)}")
    t = t.flatten(-2)
    s = s.flatten(-2)
    t_norm = t.norm(dim=-1, keepdim=True)
    s_norm = s.norm(dim=-1, keepdim=True)
    if bool((t_norm <= _NORM_FLOOR).any()) or bool((s_norm <= _NORM_FLOOR).any()):
        logger.warning("degenerate (all-zero) attention map in distillation batch")
    diff = t / t_norm.clamp_min(_NORM_FLOOR) - s / s_norm.clamp_min(_NORM_FLOOR)
    return diff.abs().sum(dim=-1).mean()


def total_at_loss(teacher_traces, student_traces, num_cascades=None):
    """Sum of per-cascade attention-transfer losses over aligned trace lists."""
    if len(teacher_traces) != len(student_traces):
        raise ValueError(
            f"trace count mismatch: {len(teacher_traces)} teacher vs {len(student_traces)} student"
        )
    expected = len(teacher_traces) if num_cascades is None else num_cascades
    if len(teacher_traces) != expected or expected == 0:
        raise ValueError(f"expected one trace pair per cascade ({expected}), got {len(teacher_traces)}")
    total = None
    for t, s in zip(teacher_traces, student_traces):
        term = at_loss_cascade(attention_map(t), attention_map(s))
        total = term if total is None else total + term
    return total
