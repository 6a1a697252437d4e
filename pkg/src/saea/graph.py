"""Sensor-graph utilities: degree/Laplacian matrices and hop-limited structural masks.

The structural mask marks sensor pairs that are *not* reachable within a given
number of hops; penalizing the masked entries of an error-coefficient matrix
confines learned error coupling to the physical network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UnsupportedOrderError, ValidationError

# |entry| at or below this counts as a structural zero; float noise must not
# flip mask bits.
SUPPORT_TOL = 1e-12


def _validate_adjacency(adjacency) -> np.ndarray:
    w = np.array(adjacency, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {w.shape}")
    if w.shape[0] == 0:
        raise ValidationError("adjacency must have at least one node")
    if not np.all(np.isfinite(w)):
        raise ValidationError("adjacency contains non-finite entries")
    if np.any(w < 0):
        raise ValidationError("adjacency weights must be nonnegative")
    if np.any(np.abs(np.diag(w)) > SUPPORT_TOL):
        raise ValidationError("adjacency may not contain self-loops (nonzero diagonal)")
    return w


def _inv_sqrt_degree(degree_vector: np.ndarray) -> np.ndarray:
    """Entrywise 1/sqrt(d), with the convention 0 for zero-degree nodes."""
    out = np.zeros_like(degree_vector)
    active = degree_vector > 0
    out[active] = 1.0 / np.sqrt(degree_vector[active])
    return out


def _normalized_laplacian(w: np.ndarray) -> np.ndarray:
    deg = w.sum(axis=1)
    inv_sqrt = _inv_sqrt_degree(deg)
    lap = -(np.outer(inv_sqrt, inv_sqrt) * w)
    # Diagonal is 1 for connected nodes; isolated nodes get an all-zero row.
    np.fill_diagonal(lap, np.where(deg > 0, 1.0, 0.0))
    return lap


@dataclass(frozen=True)
class SensorGraph:
    """Weighted sensor network with derived degree and Laplacian matrices.

    All matrices are dense float64 of shape (n, n). Instances are immutable;
    the stored arrays are marked read-only.
    """

    n: int
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray
    norm_laplacian: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency) -> "SensorGraph":
        w = _validate_adjacency(adjacency)
        deg_vec = w.sum(axis=1)
        degree = np.diag(deg_vec)
        laplacian = degree - w
        norm_laplacian = _normalized_laplacian(w)
        for arr in (w, degree, laplacian, norm_laplacian):
            arr.flags.writeable = False
        return cls(
            n=w.shape[0],
            adjacency=w,
            degree=degree,
            laplacian=laplacian,
            norm_laplacian=norm_laplacian,
        )


@dataclass(frozen=True)
class StructuralMask:
    """Binary matrix: 1 marks pairs farther apart than `order` hops, 0 otherwise.

    The diagonal is always 0 (self-dependence is never penalized).
    """

    order: int
    mask: np.ndarray

    def __post_init__(self):
        self.mask.flags.writeable = False


def normalized_laplacian(graph: SensorGraph) -> np.ndarray:
    """Symmetric normalized Laplacian I - D^{-1/2} W D^{-1/2}.

    Rows and columns of zero-degree nodes are all-zero, including the
    diagonal entry (isolated-node convention).
    """
    return _normalized_laplacian(np.asarray(graph.adjacency, dtype=np.float64))


def normalized_adjacency(graph: SensorGraph) -> np.ndarray:
    """Symmetrically normalized adjacency D^{-1/2} W D^{-1/2}."""
    w = np.asarray(graph.adjacency, dtype=np.float64)
    inv_sqrt = _inv_sqrt_degree(w.sum(axis=1))
    return np.outer(inv_sqrt, inv_sqrt) * w


def structural_mask(graph: SensorGraph, order: int) -> StructuralMask:
    """Mask of sensor pairs beyond `order` hops of each other.

    Order 1 takes the support of the normalized Laplacian (one minus the
    ceiling of its absolute value); order 2 applies the same construction to
    the support of W + W^2. Entries are strictly binary and the diagonal is
    forced to 0.
    """
    if order not in (1, 2):
        raise UnsupportedOrderError(f"mask order must be 1 or 2, got {order}")
    if order == 1:
        support = np.abs(graph.norm_laplacian) > SUPPORT_TOL
    else:
        w = np.asarray(graph.adjacency, dtype=np.float64)
        support = np.abs(w + w @ w) > SUPPORT_TOL
    mask = np.where(support, 0.0, 1.0)
    np.fill_diagonal(mask, 0.0)
    return StructuralMask(order=order, mask=mask)


def load_adjacency_csv(path) -> SensorGraph:
    """Read a headerless N x N CSV of nonnegative weights into a SensorGraph."""
    try:
        w = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"malformed adjacency CSV {path}: {exc}") from exc
    return SensorGraph.from_adjacency(w)


def save_adjacency_csv(graph: SensorGraph, path) -> None:
    """Write the adjacency matrix as a headerless CSV (lossless float repr)."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in graph.adjacency:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")
