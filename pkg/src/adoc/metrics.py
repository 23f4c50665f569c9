"""Character- and word-level accuracy metrics over decoded label sequences.

Character counts come from a unit-cost edit alignment between ground truth
and prediction. Among minimum-cost alignments the one with the most matches
is used (match preferred over substitution, substitution over insert/delete),
which pins down TP uniquely; FP and FN then follow from the sequence lengths:
every unmatched predicted character is a false positive and every unmatched
ground-truth character a false negative. Set-level metrics micro-average the
counts over all samples.
"""

from __future__ import annotations

from dataclasses import dataclass


def char_alignment(gt, pred) -> tuple[int, int, int]:
    """(TP, FP, FN) for one ground-truth/prediction pair."""
    gt = list(gt)
    pred = list(pred)
    n, m = len(gt), len(pred)
    # dp[i][j] = (cost, -matches) of aligning gt[:i] with pred[:j];
    # lexicographic minimum maximizes matches at equal cost.
    dp = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = (i, 0)
    for j in range(1, m + 1):
        dp[0][j] = (j, 0)
    for i in range(1, n + 1):
        row = dp[i]
        above = dp[i - 1]
        gi = gt[i - 1]
        for j in range(1, m + 1):
            dc, dm = above[j - 1]
            if gi == pred[j - 1]:
                diag = (dc, dm - 1)
            else:
                diag = (dc + 1, dm)
            up = (above[j][0] + 1, above[j][1])
            left = (row[j - 1][0] + 1, row[j - 1][1])
            row[j] = min(diag, up, left)
    tp = -dp[n][m][1]
    return tp, m - tp, n - tp


@dataclass
class EvalResult:
    """Micro-averaged metrics over an evaluation set."""

    char_accuracy: float
    word_accuracy: float
    recall: float
    tp: int
    fp: int
    fn: int
    sample_count: int

    def as_dict(self) -> dict:
        return {
            "char_accuracy": self.char_accuracy,
            "word_accuracy": self.word_accuracy,
            "recall": self.recall,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "sample_count": self.sample_count,
        }


def evaluate_pairs(pairs) -> EvalResult:
    """Aggregate metrics for an iterable of (ground truth, prediction)."""
    tp = fp = fn = 0
    exact = 0
    count = 0
    for gt, pred in pairs:
        t, p, f = char_alignment(gt, pred)
        tp += t
        fp += p
        fn += f
        exact += int(list(gt) == list(pred))
        count += 1
    if count == 0:
        raise ValueError("cannot evaluate an empty set")
    return EvalResult(
        char_accuracy=tp / (tp + fp) if tp + fp else 0.0,
        word_accuracy=exact / count,
        recall=tp / (tp + fn) if tp + fn else 1.0,
        tp=tp,
        fp=fp,
        fn=fn,
        sample_count=count,
    )


def char_accuracy(pairs) -> float:
    """Matched characters over predicted characters (precision)."""
    return evaluate_pairs(pairs).char_accuracy


def recall(pairs) -> float:
    """Matched characters over ground-truth characters."""
    return evaluate_pairs(pairs).recall


def word_accuracy(pairs) -> float:
    """Fraction of exact sequence matches."""
    return evaluate_pairs(pairs).word_accuracy
