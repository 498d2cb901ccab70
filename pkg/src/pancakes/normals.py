"""Point-cloud normals from local neighbor covariance, and nearest-normal lookup."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPointsError, NoReliableNormalError
from .geometry import eigendecompose_sym3

LEAF_SIZE = 16
# second-smallest / largest eigenvalue below this means the neighborhood is a line
DEGENERATE_RATIO = 1e-6


def _sq_dist(points, query):
    d = points - query
    return np.sum(d * d, axis=-1)


@dataclass(frozen=True)
class NormalField:
    points: np.ndarray
    normals: np.ndarray
    reliable: np.ndarray
    tree: cKDTree = None
    reliable_index: np.ndarray = None

    @classmethod
    def build(cls, points, normals, reliable=None):
        points = np.asarray(points, dtype=np.float64)
        normals = np.asarray(normals, dtype=np.float64)
        reliable = np.ones(len(points), bool) if reliable is None else np.asarray(reliable, bool)
        idx = np.flatnonzero(reliable)
        tree = cKDTree(points[idx], leafsize=LEAF_SIZE, balanced_tree=True) if len(idx) else None
        return cls(points, normals, reliable, tree, idx)

    def nearest_index(self, queries, candidates=8):
        """Index of the Euclidean-nearest reliable point for each query.

        Ties go to the lowest point index, which makes the answer identical
        to an argmin over ``sum((points - q)**2)`` restricted to reliable
        points.
        """
        if self.tree is None:
            raise NoReliableNormalError("normal field has no reliable normals")
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        q = queries.reshape(-1, 3)
        if not np.all(np.isfinite(q)):
            raise ValueError("nearest_normal query must be finite")
        pts = self.points[self.reliable_index]
        k = min(candidates, len(pts))
        _, cand = self.tree.query(q, k=k)
        cand = cand.reshape(len(q), k)
        # recompute distances with the brute-force formula so ties resolve identically
        d2 = np.sum((pts[cand] - q[:, None, :]) ** 2, axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        best = np.take_along_axis(cand, order[:, :1], axis=1)[:, 0]
        best_d2 = np.take_along_axis(d2, order[:, :1], axis=1)[:, 0]
        # a tie that fills every candidate slot may hide a lower index: scan those
        saturated = np.flatnonzero(np.max(d2, axis=1) <= best_d2) if k < len(pts) else []
        for i in saturated:
            best[i] = int(np.argmin(_sq_dist(pts, q[i])))
        out = self.reliable_index[best]
        return out[0] if single else out

    def nearest_normal(self, queries):
        return self.normals[self.nearest_index(queries)]


def _neighbors_excluding_self(points, k):
    tree = cKDTree(points, leafsize=LEAF_SIZE, balanced_tree=True)
    _, idx = tree.query(points, k=k + 1)
    own = np.arange(len(points))[:, None]
    is_self = idx == own
    # duplicates can push the point itself out of slot 0; drop it wherever it is
    has_self = is_self.any(axis=1)
    drop = np.where(has_self, np.argmax(is_self, axis=1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(len(points)), drop] = False
    return idx[keep].reshape(len(points), k)


def estimate_normals(points, k=10):
    """Normals from the covariance of each point's k nearest other points.

    The normal is the eigenvector of the smallest eigenvalue; its sign is
    arbitrary. Neighborhoods whose scatter is (nearly) rank one get a
    ``reliable=False`` flag and are skipped by lookups.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 3:
        raise ValueError("k must be at least 3")
    if len(points) <= k:
        raise InsufficientPointsError(f"need more than k={k} points, got {len(points)}")
    nbr = _neighbors_excluding_self(points, k)
    centered = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    C = np.einsum("nki,nkj->nij", centered, centered) / (k - 1)
    evals, evecs = eigendecompose_sym3(C)
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    lam_max = evals[:, 2]
    reliable = (lam_max > 0) & (evals[:, 1] > DEGENERATE_RATIO * np.abs(lam_max))
    return NormalField.build(points, normals, reliable)


def nearest_normal(field, query):
    return field.nearest_normal(query)
