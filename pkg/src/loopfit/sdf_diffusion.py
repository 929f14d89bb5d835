"""Signed distance field of the canonical surface and diffused model functions.

Every voxel stores its exact closest surface point (triangle + barycentric
coordinates). A per-vertex function is diffused to the volume by evaluating
its barycentric interpolation at that closest point; trilinear interpolation
of the stored voxel values makes the result continuous in space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry

# (corner dx, dy, dz) in the order used by every stencil
CORNERS = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64)


class SignUndefinedError(ValueError):
    """The mesh is not closed, so inside/outside is undefined."""


class DomainError(ValueError):
    """A query point lies outside the voxel-center lattice."""


@dataclass
class DiffusedGrid:
    lo: np.ndarray
    hi: np.ndarray
    resolution: np.ndarray  # (nx, ny, nz)
    channels: dict = field(default_factory=dict)  # name -> float32 (C, nz, ny, nx)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        self.resolution = np.asarray(self.resolution, dtype=np.int64).reshape(3)

    @property
    def voxel_size(self):
        return (self.hi - self.lo) / self.resolution

    @property
    def voxel_diagonal(self):
        return float(np.linalg.norm(self.voxel_size))

    @property
    def num_voxels(self):
        return int(np.prod(self.resolution))

    @property
    def lattice_lo(self):
        return self.lo + 0.5 * self.voxel_size

    @property
    def lattice_hi(self):
        return self.hi - 0.5 * self.voxel_size

    def centers(self):
        """Voxel centers, (num_voxels, 3), x fastest."""
        nx, ny, nz = self.resolution
        h = self.voxel_size
        iz, iy, ix = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return self.lo + (idx + 0.5) * h

    def flat_index(self, ijk):
        nx, ny, _ = self.resolution
        ijk = np.asarray(ijk)
        return (ijk[..., 2] * ny + ijk[..., 1]) * nx + ijk[..., 0]

    def channel(self, name):
        return self.channels[name]

    def flat(self, name):
        c = self.channels[name]
        return c.reshape(c.shape[0], -1)

    def voxel_major(self, name):
        """(num_voxels, C) contiguous copy of a channel, built once per grid."""
        cache = self.__dict__.setdefault("_voxel_major", {})
        source = self.channels[name]
        if name not in cache or cache[name][0] is not source:
            cache[name] = (source, np.ascontiguousarray(self.flat(name).T))
        return cache[name][1]

    def has(self, name):
        return name in self.channels

    def contains(self, points, tol=0.0):
        p = np.atleast_2d(points)
        return np.all((p >= self.lattice_lo - tol) & (p <= self.lattice_hi + tol), axis=1)

    def clamp(self, points):
        """Clamp into the voxel-center lattice; returns (clamped, displacement)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c = np.clip(p, self.lattice_lo, self.lattice_hi)
        return c, p - c


# -- construction --------------------------------------------------------------

def _as_resolution(resolution):
    r = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    if (r < 2).any():
        raise ValueError("resolution must be at least 2 per axis")
    return r


def _as_bounds(bounds):
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape == (2,):
        lo, hi = np.full(3, b[0]), np.full(3, b[1])
    else:
        lo, hi = b.reshape(2, 3)
    if (hi <= lo).any():
        raise ValueError("bounds must have hi > lo")
    return lo, hi


def signed_distance_signs(grid, unsigned, vertices, faces):
    """Inside/outside for every voxel from generalized winding numbers.

    Winding numbers are evaluated for voxels within half a voxel diagonal of
    the surface and for one representative of each connected region of the
    remaining voxels: adjacent centers farther than that from the surface
    cannot lie on opposite sides of it.
    """
    nx, ny, nz = grid.resolution
    band = unsigned <= 0.5 * grid.voxel_diagonal * (1 + 1e-9)
    inside = np.zeros(grid.num_voxels, dtype=bool)
    centers = grid.centers()
    if band.any():
        inside[band] = geometry.winding_numbers(centers[band], vertices, faces) > 0.5
    far = (~band).reshape(nz, ny, nx)
    labels, count = ndimage.label(far, structure=np.ones((3, 3, 3)))
    labels = labels.ravel()
    if count:
        reps = ndimage.minimum(np.arange(grid.num_voxels), labels, np.arange(1, count + 1))
        reps = np.asarray(reps, dtype=np.int64)
        rep_inside = geometry.winding_numbers(centers[reps], vertices, faces) > 0.5
        lookup = np.zeros(count + 1, dtype=bool)
        lookup[1:] = rep_inside
        inside[~band] = lookup[labels[~band]]
    return inside


def build_sdf(model, bounds=(-0.5, 0.5), resolution=64):
    """SDF plus the exact closest-surface record at every voxel center."""
    vertices, faces = model.vertices, model.faces
    try:
        geometry.audit_mesh(vertices, faces)
    except geometry.MeshError as exc:
        raise SignUndefinedError(f"sign is undefined for a non-watertight mesh: {exc}") from exc
    lo, hi = _as_bounds(bounds)
    grid = DiffusedGrid(lo, hi, _as_resolution(resolution))
    if not (grid.contains(vertices, tol=0.5 * grid.voxel_size.max()).all()):
        raise ValueError("mesh extends outside the grid bounds")
    index = geometry.TriangleIndex(vertices, faces)
    closest, d2, tri, bary = index.query(grid.centers())
    unsigned = np.sqrt(d2)
    inside = signed_distance_signs(grid, unsigned, vertices, faces)
    sdf = np.where(inside, -unsigned, unsigned)
    shape = (int(grid.resolution[2]), int(grid.resolution[1]), int(grid.resolution[0]))
    grid.channels["sdf"] = sdf.astype(np.float32).reshape((1,) + shape)
    grid.channels["closest_tri"] = tri.astype(np.float32).reshape((1,) + shape)
    grid.channels["closest_bary"] = bary.T.astype(np.float32).reshape((3,) + shape)
    return grid


def closest_surface(grid):
    """Exact per-voxel provenance: (triangle index, barycentric) as float64."""
    tri = grid.flat("closest_tri")[0].astype(np.int64)
    bary = grid.flat("closest_bary").T.astype(np.float64)
    return tri, bary


def diffuse_function(grid, faces, values, chunk=32768):
    """Diffuse a per-vertex function (V, ...) to every voxel; returns (C, nz, ny, nx).

    The voxel value is the barycentric combination of the function at the
    corners of the voxel's closest triangle.
    """
    values = np.asarray(values, dtype=np.float64)
    flat_vals = values.reshape(len(values), -1)
    tri, bary = closest_surface(grid)
    corners = np.asarray(faces)[tri]
    out = np.empty((flat_vals.shape[1], grid.num_voxels), dtype=np.float32)
    for start in range(0, grid.num_voxels, chunk):
        sl = slice(start, start + chunk)
        acc = np.einsum("na,nac->nc", bary[sl], flat_vals[corners[sl]])
        out[:, sl] = acc.T
    nx, ny, nz = grid.resolution
    return out.reshape(-1, int(nz), int(ny), int(nx))


def build_grid(model, bounds=(-0.5, 0.5), resolution=64, blendshapes=True):
    """Full diffused model: SDF, closest point, skinning and blendshape fields."""
    grid = build_sdf(model, bounds, resolution)
    grid.channels["closest_point"] = diffuse_function(grid, model.faces, model.vertices)
    grid.channels["skin"] = diffuse_function(grid, model.faces, model.skinning_weights)
    if blendshapes:
        grid.channels["pose_blend"] = diffuse_function(grid, model.faces, model.pose_blendshapes)
        grid.channels["shape_blend"] = diffuse_function(grid, model.faces, model.shape_blendshapes)
    grid.metadata.update({"model": model.name, "num_joints": model.num_joints,
                          "num_betas": model.num_betas, "num_vertices": model.num_vertices})
    return grid


# -- trilinear evaluation ---------------------------------------------------------

@dataclass
class Stencil:
    index: np.ndarray    # (N, 8) flat voxel indices
    weight: np.ndarray   # (N, 8)
    dweight: np.ndarray  # (N, 8, 3) spatial derivative of each weight
    frac: np.ndarray     # (N, 3) position inside the cell, in [0, 1]


def stencil(grid, points, check=True):
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if check and not grid.contains(p, tol=1e-12).all():
        bad = np.flatnonzero(~grid.contains(p, tol=1e-12))
        raise DomainError(f"{len(bad)} points outside the voxel-center lattice, first at index {bad[0]}: {p[bad[0]]}")
    h = grid.voxel_size
    u = (p - grid.lo) / h - 0.5
    base = np.clip(np.floor(u).astype(np.int64), 0, grid.resolution - 2)
    f = np.clip(u - base, 0.0, 1.0)
    corner = base[:, None, :] + CORNERS[None, :, :]
    index = grid.flat_index(corner)
    # per-axis linear weights and their derivatives
    wa = np.where(CORNERS[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
    da = np.where(CORNERS[None, :, :] == 1, 1.0, -1.0) / h
    weight = wa[..., 0] * wa[..., 1] * wa[..., 2]
    dweight = np.stack([
        da[..., 0] * wa[..., 1] * wa[..., 2],
        wa[..., 0] * da[..., 1] * wa[..., 2],
        wa[..., 0] * wa[..., 1] * da[..., 2],
    ], axis=-1)
    return Stencil(index, weight, np.broadcast_to(dweight, weight.shape + (3,)), f)


def gather(grid, name, st):
    """Channel values at the 8 stencil corners, (N, 8, C) float64."""
    return grid.voxel_major(name)[st.index].astype(np.float64)


def eval_field(grid, name, points):
    st = stencil(grid, points)
    vals = np.einsum("nc,ncd->nd", st.weight, gather(grid, name, st))
    return vals[:, 0] if vals.shape[1] == 1 else vals


def eval_field_gradient(grid, name, points):
    """Spatial gradient of the trilinear interpolant, (N, C, 3) or (N, 3)."""
    st = stencil(grid, points)
    grad = np.einsum("nce,ncd->nde", st.dweight, gather(grid, name, st))
    return grad[:, 0] if grad.shape[1] == 1 else grad


def cell_boundary_distance(grid, points):
    """Distance from each point to the nearest plane of voxel centers."""
    u = (np.atleast_2d(points) - grid.lo) / grid.voxel_size - 0.5
    frac = u - np.floor(u)
    return (np.minimum(frac, 1.0 - frac) * grid.voxel_size).min(axis=1)
