"""Three-component PCA of token features rendered as an RGB grid."""

from __future__ import annotations

import warnings

import numpy as np

from .mvfuser import TokenSequence
from .seghead import write_ppm
from .tensor import DimensionError, Tensor


class RankWarning(UserWarning):
    """Fewer than the requested principal directions carry variance."""


def power_iteration(C: np.ndarray, k: int = 3, iters: int = 2000, tol: float = 1e-13, seed: int = 0):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Returns ``(values, vectors)`` with vectors as columns. Directions whose
    eigenvalue is negligible relative to the trace are dropped, so fewer than
    ``k`` pairs come back for rank-deficient input.
    """
    C = np.array(C, dtype=np.float64)
    n = C.shape[0]
    rng = np.random.default_rng(seed)
    scale = max(np.trace(C), 1e-300)
    vals, vecs = [], []
    for _ in range(min(k, n)):
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = C @ v
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                break
            w /= nw
            if w @ v < 0:
                w = -w
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        lam = float(v @ C @ v)
        if lam <= 1e-10 * scale:
            break
        vals.append(lam)
        vecs.append(v)
        C = C - lam * np.outer(v, v)
    vecs = np.stack(vecs, axis=1) if vecs else np.zeros((n, 0))
    return np.asarray(vals), vecs


def pca_project(X: np.ndarray, k: int = 3):
    """Mean-center ``X (T, D)`` and project onto its top ``k`` directions (zero-padded if rank < k)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DimensionError(f"PCA needs a (T, D) matrix with T >= 3, got {X.shape}")
    Xc = X - X.mean(axis=0)
    vals, vecs = power_iteration(Xc.T @ Xc / X.shape[0], k)
    proj = Xc @ vecs
    if proj.shape[1] < k:
        warnings.warn(f"feature rank {proj.shape[1]} < {k}; padding with zero channels", RankWarning)
        proj = np.concatenate([proj, np.zeros((X.shape[0], k - proj.shape[1]))], axis=1)
        vals = np.concatenate([vals, np.zeros(k - len(vals))])
    return proj, vals


def to_uint8(proj: np.ndarray) -> np.ndarray:
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.round(255 * (proj - lo) / span).astype(np.uint8)


def pca_visualize(features: TokenSequence, path=None, index: int = 0) -> np.ndarray:
    """RGB ``(h, w, 3)`` uint8 image from the first three principal components of one image's tokens."""
    tok = features.tokens.data if isinstance(features.tokens, Tensor) else np.asarray(features.tokens)
    if tok.ndim == 3:
        tok = tok[index]
    proj, _ = pca_project(tok, 3)
    img = to_uint8(proj).reshape(features.grid[0], features.grid[1], 3)
    if path is not None:
        write_ppm(path, img)
    return img
