"""Triangular meshes, P1 finite-element matrices and projection matrices.

Locations are plain ``(n, 2)`` arrays of (lon, lat) in degrees and all
distances are Euclidean in degree units.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, Delaunay, QhullError
from scipy.spatial.distance import pdist

from .exceptions import DegenerateGeometryError, OutOfDomainError

__all__ = [
    "Point2",
    "MeshConfig",
    "TriMesh",
    "FemMatrices",
    "as_locations",
    "build_mesh",
    "mesh_from_triangles",
    "assemble_fem",
    "project",
    "write_mesh",
    "read_mesh",
]

CONTAINMENT_TOL = 1e-9


class Point2(NamedTuple):
    lon: float
    lat: float


@dataclass(frozen=True)
class MeshConfig:
    """Mesh construction settings.

    Parameters
    ----------
    extension : float
        Width of the band of extra nodes around the data hull, as a fraction
        of the domain diameter. ``0`` disables the band.
    max_edge : float, optional
        Node spacing inside the band, in degrees. Defaults to 1.5 times the
        typical interior node spacing.
    node_ratio : float
        Target ratio of interior mesh nodes to data locations.
    max_nodes : int
        Hard cap on the total node count.
    """

    extension: float = 0.1
    max_edge: float | None = None
    node_ratio: float = 0.3
    max_nodes: int = 5000


@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass ``C`` (stored as its diagonal), stiffness ``G1`` and ``G2``."""

    c: np.ndarray
    G1: sp.csr_matrix
    G2: sp.csr_matrix

    @property
    def C(self) -> sp.csr_matrix:
        return sp.diags(self.c).tocsr()


def as_locations(locations) -> np.ndarray:
    loc = np.asarray(locations, dtype=float)
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise ValueError(f"expected (n, 2) locations, got shape {loc.shape}")
    if not np.all(np.isfinite(loc)):
        raise ValueError("locations must be finite")
    return loc


def _boundary_flags(n_nodes, triangles):
    edges = np.sort(
        np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]),
        axis=1,
    )
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    flags = np.zeros(n_nodes, dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def _make_mesh(nodes, triangles):
    nodes = np.asarray(nodes, dtype=float)
    tri = np.asarray(triangles, dtype=np.int64).copy()
    p = nodes[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    scale = max(np.ptp(nodes, axis=0).max(), 1e-300) ** 2
    if np.any(np.abs(area) <= 1e-14 * scale):
        raise DegenerateGeometryError("mesh contains a zero-area triangle")
    nodes.setflags(write=False)
    tri.setflags(write=False)
    boundary = _boundary_flags(nodes.shape[0], tri)
    boundary.setflags(write=False)
    return TriMesh(nodes, tri, boundary)


def _farthest_points(loc, seed_idx, target):
    chosen = list(seed_idx)
    dmin = np.full(loc.shape[0], np.inf)
    for j in chosen:
        dmin = np.minimum(dmin, np.hypot(*(loc - loc[j]).T))
    while len(chosen) < target:
        j = int(np.argmax(dmin))
        if dmin[j] <= 0:
            break
        chosen.append(j)
        dmin = np.minimum(dmin, np.hypot(*(loc - loc[j]).T))
    return np.array(sorted(chosen))


def _ring(hull_pts, margin, spacing, max_count):
    theta = np.linspace(0.0, 2 * np.pi, 32, endpoint=False)
    disc = margin * np.column_stack([np.cos(theta), np.sin(theta)])
    cloud = (hull_pts[:, None, :] + disc[None, :, :]).reshape(-1, 2)
    outer = cloud[ConvexHull(cloud).vertices]
    closed = np.vstack([outer, outer[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    perimeter = seg.sum()
    count = int(min(max(np.ceil(perimeter / spacing), 3), max_count))
    s = np.arange(count) * perimeter / count
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    w = ((s - cum[k]) / seg[k])[:, None]
    return closed[k] * (1 - w) + closed[k + 1] * w


def build_mesh(locations, config: MeshConfig | None = None) -> TriMesh:
    """Delaunay mesh whose hull contains every location.

    Interior nodes are a farthest-point subsample of the locations that
    always includes their convex-hull vertices, so the data hull is covered
    exactly. An optional ring of nodes outside the hull pushes the mesh
    boundary away from the data.
    """
    config = config or MeshConfig()
    loc = as_locations(locations)
    uniq, first = np.unique(loc, axis=0, return_index=True)
    if len(uniq) < len(loc):
        warnings.warn(f"{len(loc) - len(uniq)} duplicate locations removed", stacklevel=2)
        loc = loc[np.sort(first)]
    if len(loc) < 3:
        raise DegenerateGeometryError("need at least 3 distinct locations")
    centered = loc - loc.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise DegenerateGeometryError("locations are collinear")

    hull = ConvexHull(loc)
    hull_idx = hull.vertices
    budget = config.max_nodes
    target = int(np.clip(round(config.node_ratio * len(loc)), len(hull_idx), budget))
    if len(hull_idx) > budget:
        raise DegenerateGeometryError(f"{len(hull_idx)} hull vertices exceed the node cap {budget}")
    nodes = loc[_farthest_points(loc, hull_idx, target)]

    if config.extension > 0:
        diameter = pdist(loc[hull_idx]).max()
        margin = config.extension * diameter
        spacing = config.max_edge or np.sqrt(hull.volume / max(len(nodes), 1)) * 1.5
        n_rings = max(1, int(np.ceil(margin / spacing - 0.25)))
        for k in range(1, n_rings + 1):
            room = budget - len(nodes)
            if room < 3:
                break
            ring = _ring(loc[hull_idx], margin * k / n_rings, spacing, room)
            nodes = np.vstack([nodes, ring])

    try:
        tri = Delaunay(nodes)
    except QhullError as exc:
        raise DegenerateGeometryError(str(exc)) from exc
    simplices = tri.simplices
    p = nodes[simplices]
    area = np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                  - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    # collinear ring or hull nodes can yield flat slivers along the outer boundary
    keep = area > 1e-12 * np.ptp(nodes, axis=0).max() ** 2
    return _make_mesh(nodes, simplices[keep])


def mesh_from_triangles(nodes, triangles) -> TriMesh:
    """Mesh from explicit nodes and node-index triples (orientation is normalized)."""
    return _make_mesh(as_locations(nodes), triangles)


def _local_geometry(mesh):
    p = mesh.nodes[mesh.triangles]
    # edge opposite vertex k, rotated, gives 2*area*grad(lambda_k)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = 0.5 * (e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
    grad = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2 * area)[:, None, None]
    return area, grad


def assemble_fem(mesh: TriMesh) -> FemMatrices:
    """Lumped mass matrix and P1 stiffness matrices ``G1`` and ``G2 = G1 C^-1 G1``."""
    area, grad = _local_geometry(mesh)
    if np.any(area <= 0):
        raise DegenerateGeometryError("mesh contains a zero-area or inverted triangle")
    n = mesh.n_nodes
    tri = mesh.triangles
    c = np.bincount(tri.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    local = area[:, None, None] * np.einsum("tik,tjk->tij", grad, grad)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    G1 = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    G1.sum_duplicates()
    G1 = ((G1 + G1.T) * 0.5).tocsr()
    G2 = (G1 @ sp.diags(1.0 / c) @ G1).tocsr()
    G2 = ((G2 + G2.T) * 0.5).tocsr()
    c.setflags(write=False)
    return FemMatrices(c=c, G1=G1, G2=G2)


def project(mesh: TriMesh, targets, tol: float = CONTAINMENT_TOL, chunk: int = 512) -> sp.csr_matrix:
    """Sparse ``(n_targets, n_nodes)`` matrix of barycentric interpolation weights.

    Raises
    ------
    OutOfDomainError
        If a target is not inside any triangle (up to ``tol``).
    """
    pts = as_locations(targets)
    p = mesh.nodes[mesh.triangles]
    origin = p[:, 0]
    basis = np.stack([p[:, 1] - origin, p[:, 2] - origin], axis=2)  # (m, 2, 2)
    inv = np.linalg.inv(basis)
    rows, cols, vals = [], [], []
    for start in range(0, len(pts), chunk):
        block = pts[start:start + chunk]
        rel = block[:, None, :] - origin[None]
        lam12 = np.einsum("mij,bmj->bmi", inv, rel)
        lam = np.concatenate([1.0 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
        inside = np.all(lam >= -tol, axis=2)
        hit = inside.any(axis=1)
        if not hit.all():
            bad = block[np.argmin(hit)]
            raise OutOfDomainError(f"location ({bad[0]:.6g}, {bad[1]:.6g}) is outside the mesh")
        k = np.argmax(inside, axis=1)
        w = np.clip(lam[np.arange(len(block)), k], 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        idx = np.arange(start, start + len(block))
        rows.append(np.repeat(idx, 3))
        cols.append(mesh.triangles[k].ravel())
        vals.append(w.ravel())
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(pts), mesh.n_nodes),
    ).tocsr()
    A.eliminate_zeros()
    return A


def write_mesh(mesh: TriMesh, nodes_path, triangles_path) -> None:
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "lon", "lat"])
        for i, (x, y) in enumerate(mesh.nodes):
            w.writerow([i, repr(float(x)), repr(float(y))])
    with open(triangles_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tri_id", "n1", "n2", "n3"])
        for i, t in enumerate(mesh.triangles):
            w.writerow([i, *map(int, t)])


def read_mesh(nodes_path, triangles_path) -> TriMesh:
    nodes = np.loadtxt(Path(nodes_path), delimiter=",", skiprows=1, ndmin=2)
    tris = np.loadtxt(Path(triangles_path), delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    order = np.argsort(nodes[:, 0])
    return _make_mesh(nodes[order, 1:3], tris[np.argsort(tris[:, 0]), 1:4])
