"""Score matrix, dual-softmax assignment, matchability and match extraction."""
import numpy as np
import torch
from scipy.spatial.distance import cdist
from torch import nn

from ._validation import check_matrix
from .exceptions import ShapeMismatch


def score_matrix(fm_a, fm_b):
    """Plain inner products F_A F_B^T (no temperature, no normalisation)."""
    if fm_a.shape[-1] != fm_b.shape[-1]:
        raise ShapeMismatch(f"feature widths differ: {fm_a.shape[-1]} vs {fm_b.shape[-1]}")
    return fm_a @ fm_b.T


def dual_softmax(s):
    """Row softmax times column softmax, computed in log space."""
    return torch.exp(log_dual_softmax(s))


def log_dual_softmax(s):
    return torch.log_softmax(s, dim=1) + torch.log_softmax(s, dim=0)


class MatchabilityHead(nn.Module):
    """sigmoid(Linear(f)): per-keypoint probability that a match exists."""

    def __init__(self, dim):
        super().__init__()
        self.linear = nn.Linear(dim, 1)

    def logits(self, fm):
        return self.linear(fm).squeeze(-1)

    def forward(self, fm):
        return torch.sigmoid(self.logits(fm))


def matchability(fm, head):
    return head(fm)


def extract_matches(p, sigma_a, sigma_b, p_threshold=0.2, min_matchability=0.1):
    """Mutual-argmax pairs above both thresholds, sorted by probability (descending).

    Returns a list of ``(i, j, p_ij)``; ties in argmax go to the lowest index.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        return []
    sigma_a = np.asarray(sigma_a, dtype=np.float64)
    sigma_b = np.asarray(sigma_b, dtype=np.float64)
    row_best = np.argmax(p, axis=1)
    col_best = np.argmax(p, axis=0)
    out = []
    for i, j in enumerate(row_best):
        if col_best[j] != i:
            continue
        pij = p[i, j]
        if pij >= p_threshold and min(sigma_a[i], sigma_b[j]) >= min_matchability:
            out.append((int(i), int(j), float(pij)))
    out.sort(key=lambda m: (-m[2], m[0]))
    return out


def _two_nearest(desc_a, desc_b):
    a = check_matrix(desc_a, "desc_a")
    b = check_matrix(desc_b, "desc_b", ncols=a.shape[1])
    if len(b) < 2:
        raise ValueError("need at least two candidate descriptors")
    d = cdist(a, b)
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(a))
    d1 = d[rows, order[:, 0]]
    d2nd = d[rows, order[:, 1]]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d2nd > 0, d1 / np.where(d2nd > 0, d2nd, 1.0), 1.0)
    return order[:, 0], ratio


def lowe_ratios(desc_a, desc_b):
    """Nearest / second-nearest Euclidean distance ratio for every row of ``desc_a``."""
    return _two_nearest(desc_a, desc_b)[1]


def knn_ratio_match(desc_a, desc_b, ratio=0.75):
    """Nearest neighbour matches passing Lowe's ratio test, as ``(i, j, d1/d2)``."""
    nn_idx, ratios = _two_nearest(desc_a, desc_b)
    keep = np.flatnonzero(ratios < ratio)
    return [(int(i), int(nn_idx[i]), float(ratios[i])) for i in keep]


def ratio_histogram(desc_a, desc_b, bins=20):
    """Histogram of Lowe ratios over [0, 1]; returns ``(counts, edges)``."""
    return np.histogram(lowe_ratios(desc_a, desc_b), bins=bins, range=(0.0, 1.0))
