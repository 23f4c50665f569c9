"""Alignment-free sequence loss over per-timestep log-probabilities.

The loss sums, over every blank-augmented frame path that collapses to the
target label, the path probability, and returns its negative log. Collapsing
removes consecutive repeats and then blanks; blank is class 0. The forward
dynamic program runs in the log domain over the blank-extended label
(length ``2 * len(label) + 1``) and is built from tape ops, so its gradient
comes from the tape rather than a hand-coded backward pass.
"""

from __future__ import annotations

import itertools

import numpy as np

from .tensor import (
    LOG_ZERO,
    ShapeError,
    Tensor,
    concat,
    logaddexp,
    narrow,
    neg,
    take,
)

BLANK = 0


class InfeasibleLabelError(ValueError):
    """The label cannot be produced by any path of the given length."""


def min_frames(label) -> int:
    """Fewest timesteps that can emit ``label``: one per character plus one
    separating blank per adjacent repeat."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def _validate(log_probs: Tensor, label) -> list[int]:
    if log_probs.data.ndim != 2:
        raise ShapeError(f"expected [T, classes] log-probs, got {log_probs.shape}")
    t, classes = log_probs.shape
    label = [int(c) for c in label]
    for c in label:
        if not (1 <= c < classes):
            raise ShapeError(f"label class {c} outside [1, {classes - 1}]")
    if min_frames(label) > t:
        raise InfeasibleLabelError(
            f"label of length {len(label)} needs {min_frames(label)} frames, got {t}"
        )
    return label


def ctc_loss(log_probs: Tensor, label) -> Tensor:
    """Negative log-probability of ``label`` under ``log_probs`` [T, A+1]."""
    label = _validate(log_probs, label)
    t_frames, classes = log_probs.shape

    extended = [BLANK]
    for c in label:
        extended.extend((c, BLANK))
    s = len(extended)
    ext = np.asarray(extended, dtype=np.int64)

    # A state s may be entered from s-2 only when that hop does not skip a
    # required separating blank: target is a character differing from the
    # one two slots back.
    can_skip = np.full(s, LOG_ZERO)
    for i in range(2, s):
        if ext[i] != BLANK and ext[i] != ext[i - 2]:
            can_skip[i] = 0.0
    skip_mask = Tensor(can_skip)
    log_zero_1 = Tensor(np.full(1, LOG_ZERO))
    log_zero_2 = Tensor(np.full(2, LOG_ZERO))

    # Per-frame emission scores for the extended label, gathered in one op.
    gather = (np.arange(t_frames)[:, None] * classes + ext[None, :]).astype(np.int64)
    emit = take(log_probs, gather)  # [T, S]

    start = np.full(s, LOG_ZERO)
    start[0] = 0.0
    if s > 1:
        start[1] = 0.0
    alpha = narrow(emit, 0, 0, 1).reshape(s) + Tensor(start)

    for t in range(1, t_frames):
        merged = alpha
        if s > 1:
            from_prev = concat([log_zero_1, narrow(alpha, 0, 0, s - 1)])
            merged = logaddexp(merged, from_prev)
        if s > 2:
            from_skip = concat([log_zero_2, narrow(alpha, 0, 0, s - 2)]) + skip_mask
            merged = logaddexp(merged, from_skip)
        alpha = merged + narrow(emit, 0, t, 1).reshape(s)

    if s == 1:
        total = narrow(alpha, 0, 0, 1)
    else:
        tail = narrow(alpha, 0, s - 2, 2)
        total = logaddexp(narrow(tail, 0, 0, 1), narrow(tail, 0, 1, 1))
    return neg(total.reshape(()))


def ctc_oracle(log_probs, label) -> float:
    """Exhaustive-enumeration reference: sums the probability of every frame
    path that collapses to ``label``. Only usable at tiny sizes."""
    probs = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    t_frames, classes = probs.shape
    if t_frames > 6 or classes - 1 > 4:
        raise ValueError(f"enumeration bound exceeded: T={t_frames}, alphabet={classes - 1}")
    label = tuple(int(c) for c in label)
    p = np.exp(probs)
    total = 0.0
    for path in itertools.product(range(classes), repeat=t_frames):
        if collapse(path) == label:
            prob = 1.0
            for t, c in enumerate(path):
                prob *= p[t, c]
            total += prob
    if total == 0.0:
        raise InfeasibleLabelError(f"no path of length {t_frames} collapses to {label}")
    return -float(np.log(total))


def collapse(path) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for c in path:
        if c != prev and c != BLANK:
            out.append(int(c))
        prev = c
    return tuple(out)


def greedy_decode(log_probs) -> list[int]:
    """Best-path decoding: per-timestep argmax (ties to the lowest class),
    then collapse. Never returns blanks; never longer than T."""
    probs = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if probs.ndim != 2:
        raise ShapeError(f"expected [T, classes] log-probs, got {probs.shape}")
    return list(collapse(np.argmax(probs, axis=-1)))
