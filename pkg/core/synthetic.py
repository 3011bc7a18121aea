"""
Seeded stand-ins for the benchmark data: ill-posed least squares with a
prescribed rank and sparse separable text-like classification data.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp


logger = logging.getLogger(__name__)


def make_rank_deficient_least_squares(
    m: int,
    n: int,
    rank: int,
    seed: int = 0,
    singular_range: tuple[float, float] = (0.5, 1.0),
    residual_scale: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """A = U diag(s) V^T with ``rank`` singular values in ``singular_range``; b leaves range(A)."""
    if not 1 <= rank <= min(m, n):
        raise ValueError("Rank must lie between 1 and min(m, n).")
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((m, m)))
    v, _ = np.linalg.qr(rng.standard_normal((n, n)))
    singular = np.sort(rng.uniform(*singular_range, size=rank))[::-1]
    A = (u[:, :rank] * singular) @ v[:, :rank].T
    b = A @ rng.standard_normal(n)
    if rank < m:
        b = b + residual_scale * u[:, rank]
    return A, b


def make_sparse_classification(
    examples: int,
    features: int,
    density: float,
    keywords: int = 10,
    seed: int = 0,
    keyword_hits: int = 2,
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Binary data where each example carries ``keyword_hits`` of its class's keywords.

    Features 0..keywords-1 belong to the positive class and keywords..2*keywords-1 to
    the negative one; the remaining nonzeros are noise features. All values are 1,
    so weights of +-1/keyword_hits on the keywords separate the classes with margin 1.
    """
    per_row = max(int(round(density * features)), keyword_hits)
    if 2 * keywords + per_row - keyword_hits > features:
        raise ValueError("Too few features for the requested keywords and density.")
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(examples) < 0.5, 1.0, -1.0)
    noise_pool = np.arange(2 * keywords, features)
    indptr = np.arange(0, examples * per_row + 1, per_row)
    indices = np.empty(examples * per_row, dtype=np.int64)
    for row, label in enumerate(labels):
        offset = 0 if label > 0 else keywords
        hits = offset + rng.choice(keywords, size=keyword_hits, replace=False)
        noise = rng.choice(noise_pool, size=per_row - keyword_hits, replace=False)
        indices[row * per_row : (row + 1) * per_row] = np.sort(np.concatenate([hits, noise]))
    matrix = sp.csr_matrix((np.ones(indices.size), indices, indptr), shape=(examples, features))
    logger.debug("Generated %d x %d classification data, %d nonzeros per row.", examples, features, per_row)
    return matrix, labels


def separating_weights(features: int, keywords: int = 10, keyword_hits: int = 2) -> np.ndarray:
    """Weights attaining margin exactly 1 on data from make_sparse_classification."""
    weights = np.zeros(features)
    weights[:keywords] = 1.0 / keyword_hits
    weights[keywords : 2 * keywords] = -1.0 / keyword_hits
    return weights
