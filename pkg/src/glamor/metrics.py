"""Accuracy, confusion matrices, the Stuart-Maxwell test and attention-map export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTableError, InputError


def _labels(preds, labels):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise InputError(f"{preds.size} predictions vs {labels.size} labels")
    if preds.size == 0:
        raise InputError("need at least one prediction")
    return preds, labels


def accuracy(preds, labels) -> float:
    preds, labels = _labels(preds, labels)
    return float(np.mean(preds == labels))


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return float(np.trace(self.counts) / self.total)

    def to_json(self, names=None):
        return json.dumps({"labels": list(names) if names else None,
                           "counts": self.counts.tolist()})

    def to_text(self, names=None):
        k = self.counts.shape[0]
        names = list(names) if names else [str(i) for i in range(k)]
        width = max(max(len(n) for n in names), len(str(self.counts.max())), 4) + 1
        lines = ["true\\pred".ljust(width + 2) + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.counts):
            lines.append(name.ljust(width + 2) + "".join(str(int(c)).rjust(width) for c in row))
        return "\n".join(lines)


def confusion(preds, labels, k) -> ConfusionMatrix:
    preds, labels = _labels(preds, labels)
    if min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= k:
        raise InputError(f"class indices must lie in [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


# ---------------------------------------------------------------------------
# chi-square tail


def _gamma_series(a, x):
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    term = 1.0 / a
    total = term
    n = a
    for _ in range(10000):
        n += 1
        term *= x / n
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a, x):
    """Regularized upper incomplete gamma Q(a, x) by a modified-Lentz continued fraction."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi_square_survival(x, dof) -> float:
    """P(X > x) for X ~ chi-square with ``dof`` degrees of freedom."""
    if dof < 1:
        raise InputError(f"dof must be >= 1, got {dof}")
    if x <= 0:
        return 1.0
    a, z = dof / 2.0, x / 2.0
    if z < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, z))
    return min(1.0, _gamma_cont_frac(a, z))


# ---------------------------------------------------------------------------
# Stuart-Maxwell


@dataclass
class TestResult:
    statistic: float
    dof: int
    p_value: float
    categories: tuple = ()  # categories kept after dropping degenerate ones


def _components(adj):
    k = adj.shape[0]
    seen, comps = set(), []
    for s in range(k):
        if s in seen:
            continue
        stack, comp = [s], []
        seen.add(s)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(adj[u]):
                if v not in seen:
                    seen.add(int(v))
                    stack.append(int(v))
        comps.append(sorted(comp))
    return comps


def stuart_maxwell(table, drop=-1) -> TestResult:
    """Marginal-homogeneity test for a square paired table.

    With ``d = row sums - column sums`` and ``V`` the covariance of ``d`` under
    homogeneity, the statistic is ``d' V^-1 d`` over all categories but the
    reference category ``drop`` (default: the last), referred to chi-square
    with K-1 degrees of freedom. The statistic does not depend on ``drop``.

    Categories with no discordant pairs (nothing off the diagonal in their row
    or column) carry no information and are dropped first; if every category
    drops, the margins agree trivially and the result is (0, p=1). Raises
    ``DegenerateTableError`` when the remaining discordant pairs split the
    categories into disconnected groups.
    """
    n = np.asarray(getattr(table, "counts", table), dtype=np.float64)
    if n.ndim != 2 or n.shape[0] != n.shape[1] or n.shape[0] < 2:
        raise InputError(f"need a square table with K >= 2, got shape {n.shape}")
    if (n < 0).any():
        raise InputError("counts must be nonnegative")
    sym = n + n.T
    np.fill_diagonal(sym, 0)
    keep = np.flatnonzero(sym.sum(axis=1) > 0)
    if keep.size < 2:
        return TestResult(0.0, max(keep.size - 1, 1), 1.0, tuple(int(i) for i in keep))
    comps = _components(sym[np.ix_(keep, keep)] > 0)
    if len(comps) > 1:
        groups = [[int(keep[i]) for i in c] for c in comps]
        raise DegenerateTableError(
            f"covariance is singular: categories split into unconnected groups {groups}", groups)

    sub = n[np.ix_(keep, keep)]
    s = sym[np.ix_(keep, keep)]
    rest = np.delete(np.arange(keep.size), drop % keep.size)
    d = (sub.sum(axis=1) - sub.sum(axis=0))[rest]
    v = -s[np.ix_(rest, rest)]
    np.fill_diagonal(v, s.sum(axis=1)[rest])
    stat = float(d @ np.linalg.solve(v, d))
    stat = max(stat, 0.0)
    dof = keep.size - 1
    return TestResult(stat, dof, chi_square_survival(stat, dof), tuple(int(i) for i in keep))


def paired_table(preds_a, preds_b, k) -> ConfusionMatrix:
    """Cross-tabulation of two classifiers' predictions (rows: a, columns: b)."""
    return confusion(preds_b, preds_a, k)


# ---------------------------------------------------------------------------
# attention export


def attention_image(attn, out_h, out_w):
    """Upsample an (H_c, W_c) attention map bilinearly and scale its maximum to 255 (uint8)."""
    from .data.preprocess import resize_bilinear

    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 2:
        raise InputError(f"attention map must be 2-D, got {attn.shape}")
    up = resize_bilinear(attn, out_h, out_w)
    peak = up.max()
    if peak <= 0:
        return np.zeros((out_h, out_w), dtype=np.uint8)
    return np.clip(np.rint(up / peak * 255.0), 0, 255).astype(np.uint8)


def export_attention(attn, out_h, out_w, path, text_path=None):
    """Write the attention map as a binary PGM, plus an optional exact text grid."""
    from .data.ppm import write_pgm

    write_pgm(path, attention_image(attn, out_h, out_w))
    if text_path is not None:
        write_attention_text(text_path, attn)
    return path


def write_attention_text(path, attn):
    attn = np.asarray(attn, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in attn:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_attention_text(path):
    with open(path, encoding="utf-8") as fh:
        return np.array([[float(v) for v in line.split()] for line in fh if line.strip()])
