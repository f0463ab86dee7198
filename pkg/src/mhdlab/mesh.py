"""Structured meshes on the unit square and the flat torus.

Two builders are provided:

* ``build_tri_mesh(n)``: the unit square cut into an n-by-n grid of squares,
  each split along the NE diagonal into two triangles.  Used by the
  Dirichlet-type scheme (face-based velocity, edge-based magnetic field).
* ``build_periodic_mesh(n, d)``: the flat torus [0,1)^d split into n^d
  uniform quads (d=2) or cuboids (d=3).  Opposite sides are identified, so
  every face is interior.

Faces carry a fixed unit normal; ``face_cells[f] = (K_in, K_out)`` with the
normal pointing from K_in towards K_out (for boundary faces K_out = -1 and
the normal is the outward one).  Jumps and averages in the rest of the code
are always taken with respect to this stored orientation:
jump = value(K_out) - value(K_in).

In 2D each face also carries a unit tangent used for the edge-element
degrees of freedom.  The tangent is an independent convention from the
normal: on the torus the tangent is +e1 on horizontal faces and +e2 on
vertical ones; on the triangle mesh it runs from the lower to the higher
vertex id (flipped on boundary faces so the normal is outward).
``cell_face_ccw[K, l]`` is +1 when the stored tangent of the l-th face
agrees with counterclockwise traversal of cell K, -1 otherwise; this is
the sign that enters circulation (discrete curl) formulas.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mesh:
    kind: str                 # "tri" or "quad"
    periodic: bool
    d: int                    # ambient dimension
    n: int                    # cells per direction
    vertices: np.ndarray      # (nv, d)
    cells: np.ndarray         # (nc, verts per cell), CCW in 2D
    faces: np.ndarray         # (nf, verts per face), ordered along tangent in 2D
    face_cells: np.ndarray    # (nf, 2) [K_in, K_out], K_out = -1 on the boundary
    face_normal: np.ndarray   # (nf, d) unit, K_in -> K_out
    face_area: np.ndarray     # (nf,)
    face_center: np.ndarray   # (nf, d)
    cell_volume: np.ndarray   # (nc,)
    cell_center: np.ndarray   # (nc, d)
    cell_faces: np.ndarray    # (nc, faces per cell)
    cell_face_out: np.ndarray  # (nc, fpc) +-1, +1 when face normal is outward
    interior_faces: np.ndarray
    boundary_faces: np.ndarray
    interior_vertices: np.ndarray
    boundary_vertices: np.ndarray
    h: float                  # max cell diameter
    d_sigma: np.ndarray       # (nf,) distance between adjacent cell centers
    face_tangent: np.ndarray | None = None   # (nf, d), 2D only
    cell_face_ccw: np.ndarray | None = None  # (nc, fpc), 2D only
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def cell_vertex_coords(self, wrap_aware: bool = True) -> np.ndarray:
        """Coordinates of each cell's vertices, shape (nc, vpc, d).

        On the torus a cell touching the wrap seam would otherwise pick up
        vertices from the far side of the domain; those are shifted by one
        period so that each cell is geometrically contiguous.
        """
        coords = self.vertices[self.cells]
        if self.periodic and wrap_aware:
            # shift wrapped vertices: anything more than half a cell below
            # the cell's first vertex belongs one period up
            base = coords[:, :1, :]
            delta = 1.0 / self.n
            coords = coords + (coords < base - 0.5 * delta) * 1.0
        return coords


def _tri_geometry(p0, p1, p2):
    """Area of a CCW triangle (positive) given corner coordinate arrays."""
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p1[..., 1] - p0[..., 1]) * (p2[..., 0] - p0[..., 0]))


def build_tri_mesh(n: int) -> Mesh:
    """Uniform triangulation of the unit square, 2*n^2 right triangles.

    Each grid square [i,i+1]x[j,j+1]/n is split along its NE diagonal into a
    lower triangle (SW, SE, NE corners) and an upper one (SW, NE, NW), both
    counterclockwise.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got n={n}")
    nv1 = n + 1
    delta = 1.0 / n

    xs = np.arange(nv1) * delta
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])  # id = i + (n+1)*j

    def vid(i, j):
        return i + nv1 * j

    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    for j in range(n):
        for i in range(n):
            c = 2 * (i + n * j)
            cells[c] = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1))
            cells[c + 1] = (vid(i, j), vid(i + 1, j + 1), vid(i, j + 1))

    nc = cells.shape[0]
    # face discovery: key = sorted vertex pair, first-encounter order
    face_of = {}
    face_pairs = []
    cell_faces = np.empty((nc, 3), dtype=np.int64)
    adj = []  # per face, list of (cell, local slot, traversal dir sign)
    for K in range(nc):
        v = cells[K]
        for loc in range(3):
            # local face `loc` sits opposite local vertex `loc`
            a, b = v[(loc + 1) % 3], v[(loc + 2) % 3]
            key = (min(a, b), max(a, b))
            f = face_of.get(key)
            if f is None:
                f = len(face_pairs)
                face_of[key] = f
                face_pairs.append(key)
                adj.append([])
            cell_faces[K, loc] = f
            # +1 if CCW traversal (a -> b) runs from the lower id to the higher
            adj[f].append((K, loc, 1 if a < b else -1))

    nf = len(face_pairs)
    faces = np.array(face_pairs, dtype=np.int64)
    face_cells = np.full((nf, 2), -1, dtype=np.int64)
    face_tangent = np.empty((nf, 2))
    face_normal = np.empty((nf, 2))
    face_area = np.empty(nf)
    cell_face_out = np.zeros((nc, 3))
    cell_face_ccw = np.zeros((nc, 3))

    for f in range(nf):
        a, b = faces[f]
        t = vertices[b] - vertices[a]
        length = float(np.hypot(*t))
        t = t / length
        nvec = np.array([t[1], -t[0]])  # rotate tangent by -90 degrees
        touching = adj[f]
        if len(touching) == 2:
            # the cell whose CCW traversal agrees with the stored tangent has
            # nvec as its outward normal (outward = traversal rotated -90)
            (K1, l1, s1), (K2, l2, s2) = touching
            if s1 == 1:
                kin, kout = (K1, l1), (K2, l2)
            else:
                kin, kout = (K2, l2), (K1, l1)
            face_cells[f] = (kin[0], kout[0])
            cell_face_out[kin[0], kin[1]] = 1.0
            cell_face_out[kout[0], kout[1]] = -1.0
            cell_face_ccw[kin[0], kin[1]] = 1.0
            cell_face_ccw[kout[0], kout[1]] = -1.0
        else:
            (K1, l1, s1), = touching
            if s1 == -1:
                # flip stored orientation so the normal points out of the domain
                faces[f] = (b, a)
                t = -t
                nvec = -nvec
            face_cells[f] = (K1, -1)
            cell_face_out[K1, l1] = 1.0
            cell_face_ccw[K1, l1] = 1.0
        face_tangent[f] = t
        face_normal[f] = nvec
        face_area[f] = length

    face_center = 0.5 * (vertices[faces[:, 0]] + vertices[faces[:, 1]])
    p = vertices[cells]
    cell_volume = _tri_geometry(p[:, 0], p[:, 1], p[:, 2])
    cell_center = p.mean(axis=1)

    interior = np.flatnonzero(face_cells[:, 1] >= 0)
    boundary = np.flatnonzero(face_cells[:, 1] < 0)

    on_bnd = (np.isclose(vertices[:, 0], 0) | np.isclose(vertices[:, 0], 1)
              | np.isclose(vertices[:, 1], 0) | np.isclose(vertices[:, 1], 1))
    boundary_vertices = np.flatnonzero(on_bnd)
    interior_vertices = np.flatnonzero(~on_bnd)

    d_sigma = np.empty(nf)
    kin = face_cells[:, 0]
    kout = face_cells[:, 1]
    d_sigma[interior] = np.linalg.norm(
        cell_center[kout[interior]] - cell_center[kin[interior]], axis=1)
    d_sigma[boundary] = np.linalg.norm(
        face_center[boundary] - cell_center[kin[boundary]], axis=1)

    return Mesh(
        kind="tri", periodic=False, d=2, n=n,
        vertices=vertices, cells=cells, faces=faces,
        face_cells=face_cells, face_normal=face_normal,
        face_area=face_area, face_center=face_center,
        cell_volume=cell_volume, cell_center=cell_center,
        cell_faces=cell_faces, cell_face_out=cell_face_out,
        interior_faces=interior, boundary_faces=boundary,
        interior_vertices=interior_vertices, boundary_vertices=boundary_vertices,
        h=float(np.sqrt(2.0) * delta), d_sigma=d_sigma,
        face_tangent=face_tangent, cell_face_ccw=cell_face_ccw,
    )


def build_periodic_mesh(n: int, d: int = 2) -> Mesh:
    """Uniform quad/cuboid mesh of the flat torus [0,1)^d, n^d cells.

    All faces are interior; opposite sides of the unit box are identified.
    d=2 carries the full edge/tangent structure used by the schemes, d=3 is
    geometry only (cells, faces, normals).
    """
    if d not in (2, 3):
        raise ValueError(f"need d in (2, 3), got d={d}")
    if n < 2:
        raise ValueError(f"periodic mesh needs n >= 2 so neighbors are distinct, got n={n}")
    delta = 1.0 / n

    if d == 3:
        return _periodic_mesh_3d(n, delta)

    def vid(i, j):
        return (i % n) + n * (j % n)

    def cid(i, j):
        return (i % n) + n * (j % n)

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    vertices = np.column_stack([ii.ravel() * delta, jj.ravel() * delta])

    nc = n * n
    cells = np.empty((nc, 4), dtype=np.int64)
    for j in range(n):
        for i in range(n):
            cells[cid(i, j)] = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1))

    # faces: first the n^2 vertical ones (normal +e1, at x = i/n), then the
    # n^2 horizontal ones (normal +e2, at y = j/n)
    nf = 2 * nc

    def vface(i, j):
        return (i % n) + n * (j % n)

    def hface(i, j):
        return nc + (i % n) + n * (j % n)

    faces = np.empty((nf, 2), dtype=np.int64)
    face_cells = np.empty((nf, 2), dtype=np.int64)
    face_normal = np.empty((nf, 2))
    face_tangent = np.empty((nf, 2))
    face_center = np.empty((nf, 2))
    for j in range(n):
        for i in range(n):
            f = vface(i, j)
            faces[f] = (vid(i, j), vid(i, j + 1))           # runs along +e2
            face_cells[f] = (cid(i - 1, j), cid(i, j))      # normal +e1
            face_normal[f] = (1.0, 0.0)
            face_tangent[f] = (0.0, 1.0)
            face_center[f] = (i * delta, (j + 0.5) * delta)
            f = hface(i, j)
            faces[f] = (vid(i, j), vid(i + 1, j))           # runs along +e1
            face_cells[f] = (cid(i, j - 1), cid(i, j))      # normal +e2
            face_normal[f] = (0.0, 1.0)
            face_tangent[f] = (1.0, 0.0)
            face_center[f] = ((i + 0.5) * delta, j * delta)

    face_area = np.full(nf, delta)

    cell_faces = np.empty((nc, 4), dtype=np.int64)
    cell_face_out = np.empty((nc, 4))
    cell_face_ccw = np.empty((nc, 4))
    for j in range(n):
        for i in range(n):
            K = cid(i, j)
            # order: bottom, right, top, left
            cell_faces[K] = (hface(i, j), vface(i + 1, j), hface(i, j + 1), vface(i, j))
            cell_face_out[K] = (-1.0, 1.0, 1.0, -1.0)
            cell_face_ccw[K] = (1.0, 1.0, -1.0, -1.0)

    cell_center = np.column_stack([(ii.ravel() + 0.5) * delta, (jj.ravel() + 0.5) * delta])
    cell_volume = np.full(nc, delta * delta)

    return Mesh(
        kind="quad", periodic=True, d=2, n=n,
        vertices=vertices, cells=cells, faces=faces,
        face_cells=face_cells, face_normal=face_normal,
        face_area=face_area, face_center=face_center,
        cell_volume=cell_volume, cell_center=cell_center,
        cell_faces=cell_faces, cell_face_out=cell_face_out,
        interior_faces=np.arange(nf, dtype=np.int64),
        boundary_faces=np.empty(0, dtype=np.int64),
        interior_vertices=np.arange(n * n, dtype=np.int64),
        boundary_vertices=np.empty(0, dtype=np.int64),
        h=float(np.sqrt(2.0) * delta), d_sigma=np.full(nf, delta),
        face_tangent=face_tangent, cell_face_ccw=cell_face_ccw,
    )


def _periodic_mesh_3d(n: int, delta: float) -> Mesh:
    """Cuboid torus mesh; geometry and adjacency only (no edge structure)."""
    def vid(i, j, k):
        return (i % n) + n * ((j % n) + n * (k % n))

    cid = vid
    nc = n ** 3
    rng = np.arange(n)
    kk, jj, ii = np.meshgrid(rng, rng, rng, indexing="ij")
    vertices = np.column_stack([ii.ravel() * delta, jj.ravel() * delta, kk.ravel() * delta])

    cells = np.empty((nc, 8), dtype=np.int64)
    for k in range(n):
        for j in range(n):
            for i in range(n):
                cells[cid(i, j, k)] = (
                    vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k),
                    vid(i, j, k + 1), vid(i + 1, j, k + 1), vid(i + 1, j + 1, k + 1), vid(i, j + 1, k + 1),
                )

    nf = 3 * nc
    faces = np.empty((nf, 4), dtype=np.int64)
    face_cells = np.empty((nf, 2), dtype=np.int64)
    face_normal = np.zeros((nf, 3))
    face_center = np.empty((nf, 3))
    cell_faces = np.empty((nc, 6), dtype=np.int64)
    cell_face_out = np.empty((nc, 6))

    def fidx(axis, i, j, k):
        return axis * nc + (i % n) + n * ((j % n) + n * (k % n))

    for k in range(n):
        for j in range(n):
            for i in range(n):
                f = fidx(0, i, j, k)  # normal +e1 at x = i*delta
                faces[f] = (vid(i, j, k), vid(i, j + 1, k), vid(i, j + 1, k + 1), vid(i, j, k + 1))
                face_cells[f] = (cid(i - 1, j, k), cid(i, j, k))
                face_normal[f, 0] = 1.0
                face_center[f] = (i * delta, (j + 0.5) * delta, (k + 0.5) * delta)
                f = fidx(1, i, j, k)  # normal +e2
                faces[f] = (vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j, k + 1), vid(i, j, k + 1))
                face_cells[f] = (cid(i, j - 1, k), cid(i, j, k))
                face_normal[f, 1] = 1.0
                face_center[f] = ((i + 0.5) * delta, j * delta, (k + 0.5) * delta)
                f = fidx(2, i, j, k)  # normal +e3
                faces[f] = (vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k))
                face_cells[f] = (cid(i, j, k - 1), cid(i, j, k))
                face_normal[f, 2] = 1.0
                face_center[f] = ((i + 0.5) * delta, (j + 0.5) * delta, k * delta)
                K = cid(i, j, k)
                cell_faces[K] = (fidx(0, i, j, k), fidx(0, i + 1, j, k),
                                 fidx(1, i, j, k), fidx(1, i, j + 1, k),
                                 fidx(2, i, j, k), fidx(2, i, j, k + 1))
                cell_face_out[K] = (-1.0, 1.0, -1.0, 1.0, -1.0, 1.0)

    rng3 = np.arange(nc)
    cz, cy, cx = np.meshgrid(rng, rng, rng, indexing="ij")
    cell_center = np.column_stack([(cx.ravel() + 0.5) * delta,
                                   (cy.ravel() + 0.5) * delta,
                                   (cz.ravel() + 0.5) * delta])
    del rng3

    return Mesh(
        kind="quad", periodic=True, d=3, n=n,
        vertices=vertices, cells=cells, faces=faces,
        face_cells=face_cells, face_normal=face_normal,
        face_area=np.full(nf, delta * delta), face_center=face_center,
        cell_volume=np.full(nc, delta ** 3), cell_center=cell_center,
        cell_faces=cell_faces, cell_face_out=cell_face_out,
        interior_faces=np.arange(nf, dtype=np.int64),
        boundary_faces=np.empty(0, dtype=np.int64),
        interior_vertices=np.arange(nc, dtype=np.int64),
        boundary_vertices=np.empty(0, dtype=np.int64),
        h=float(np.sqrt(3.0) * delta), d_sigma=np.full(nf, delta),
    )
