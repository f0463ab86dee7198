"""Discrete fields and operators on the meshes from :mod:`mhdlab.mesh`.

Four families of discrete fields:

* ``CellField``: piecewise constants, one value (or vector) per cell.  Used
  for density, pressure, the cell-averaged velocity and all per-cell
  derived quantities (gradients, divergence, curl).
* ``CRField``: nonconforming piecewise linear (Crouzeix-Raviart) vectors on
  the triangle mesh; one dof per face and component, the dof being the face
  mean.  Face means are single valued across faces; everything else jumps.
* ``EdgeField``: lowest-order tangential edge elements.  On triangles these
  are the classic Whitney 1-forms ``|s| (l_i grad l_j - l_j grad l_i)``; on
  the quad torus the per-cell representative is ``(a1 + b1 y, a2 + b2 x)``.
  One dof per face: the mean tangential component along the stored tangent.
  Both variants are pointwise divergence free inside each cell and their
  curl is constant per cell.
* ``PotentialField``: continuous P1/Q1 vertex potentials with zero mean.
  Their gradients lie exactly inside the edge-element space, which is what
  makes the discrete Helmholtz bookkeeping of the schemes exact.

All quadrature used for scheme-side integrands is the 3-point edge-midpoint
rule on triangles / 2x2 Gauss on quads, exact for the degree <= 2
polynomials the schemes produce.  Refinement studies measure errors with
degree 4/5 rules (6-point triangle rule, 3x3 Gauss).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

# ---------------------------------------------------------------------------
# quadrature tables (barycentric on triangles, unit square on quads,
# weights sum to one; physical integral = |K| * sum_q w_q f(x_q))

_TRI_MID = (
    np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]),
    np.full(3, 1.0 / 3.0),
)

# 6-point degree-4 rule (two symmetric orbits)
_a1, _a2 = 0.816847572980459, 0.091576213509771
_b1, _b2 = 0.108103018168070, 0.445948490915965
_TRI_DEG4 = (
    np.array([
        [_a1, _a2, _a2], [_a2, _a1, _a2], [_a2, _a2, _a1],
        [_b1, _b2, _b2], [_b2, _b1, _b2], [_b2, _b2, _b1],
    ]),
    np.array([0.109951743655322] * 3 + [0.223381589678011] * 3),
)

_g = 0.5 / np.sqrt(3.0)
_QUAD_2X2 = (
    np.array([[0.5 - _g, 0.5 - _g], [0.5 + _g, 0.5 - _g],
              [0.5 - _g, 0.5 + _g], [0.5 + _g, 0.5 + _g]]),
    np.full(4, 0.25),
)

_s = 0.5 * np.sqrt(3.0 / 5.0)
_p3 = np.array([0.5 - _s, 0.5, 0.5 + _s])
_w3 = np.array([5.0, 8.0, 5.0]) / 18.0
_QUAD_3X3 = (
    np.array([[x, y] for y in _p3 for x in _p3]),
    np.array([wy * wx for wy in _w3 for wx in _w3]),
)

# 3-point Gauss on [0,1] for face/edge means
_SEG_3 = (_p3.copy(), _w3.copy())


# ---------------------------------------------------------------------------
# field containers


@dataclass
class CellField:
    """Piecewise constant data; ``values`` has shape (nc,) or (nc, m...)."""
    mesh: Mesh
    values: np.ndarray


@dataclass
class CRField:
    """Face-mean (Crouzeix-Raviart) vector field; ``values`` is (nf, d)."""
    mesh: Mesh
    values: np.ndarray


@dataclass
class EdgeField:
    """Tangential edge-element field; ``values[f]`` is the mean tangential
    component along ``mesh.face_tangent[f]``."""
    mesh: Mesh
    values: np.ndarray


@dataclass
class PotentialField:
    """Continuous P1/Q1 potential, one value per vertex, zero mean."""
    mesh: Mesh
    values: np.ndarray


# ---------------------------------------------------------------------------
# per-mesh geometry caches


def _tri_cache(mesh: Mesh) -> dict:
    """Barycentric gradients, Whitney tables and local face bookkeeping."""
    cache = mesh._cache.get("tri")
    if cache is not None:
        return cache
    if mesh.kind != "tri":
        raise ValueError("triangle structures requested on a quad mesh")

    p = mesh.vertices[mesh.cells]          # (nc, 3, 2)
    area = mesh.cell_volume
    # grad of barycentric coordinate i: rotate opposite edge by +90 / (2A)
    e = np.empty_like(p)
    for i in range(3):
        e[:, i] = p[:, (i + 2) % 3] - p[:, (i + 1) % 3]
    lam_grad = np.empty_like(p)
    lam_grad[:, :, 0] = -e[:, :, 1]
    lam_grad[:, :, 1] = e[:, :, 0]
    lam_grad /= (2.0 * area)[:, None, None]

    # local indices (ia, ib) of the stored face endpoints (a, b): the local
    # face l is opposite local vertex l and joins the other two vertices
    nc = mesh.num_cells
    ia = np.empty((nc, 3), dtype=np.int64)
    ib = np.empty((nc, 3), dtype=np.int64)
    cells = mesh.cells
    faces = mesh.faces
    cf = mesh.cell_faces
    for loc in range(3):
        a = faces[cf[:, loc], 0]
        b = faces[cf[:, loc], 1]
        for v in range(3):
            ia[cells[:, v] == a, loc] = v
            ib[cells[:, v] == b, loc] = v

    # affine maps for barycentric evaluation: lam_i(x) = lam0_i + lam_grad_i . x
    lam0 = np.empty((nc, 3))
    for i in range(3):
        lam0[:, i] = 1.0 - np.einsum("kd,kd->k", lam_grad[:, i], p[:, i])

    # Whitney curl per (cell, local face): 2 |s| (g_ia x g_ib)
    ar = np.arange(nc)
    g_a = lam_grad[ar[:, None], ia]        # (nc, 3, 2)
    g_b = lam_grad[ar[:, None], ib]
    flen = mesh.face_area[cf]              # (nc, 3)
    whitney_curl = 2.0 * flen * (g_a[:, :, 0] * g_b[:, :, 1] - g_a[:, :, 1] * g_b[:, :, 0])

    cache = dict(lam_grad=lam_grad, lam0=lam0, ia=ia, ib=ib,
                 g_a=g_a, g_b=g_b, flen=flen, whitney_curl=whitney_curl)
    mesh._cache["tri"] = cache
    return cache


def _quad_cache(mesh: Mesh) -> dict:
    cache = mesh._cache.get("quad")
    if cache is not None:
        return cache
    if mesh.kind != "quad" or mesh.d != 2:
        raise ValueError("2D quad structures requested on an incompatible mesh")
    delta = 1.0 / mesh.n
    corner = mesh.cell_center - 0.5 * delta
    cache = dict(delta=delta, corner=corner)
    mesh._cache["quad"] = cache
    return cache


def _barycentric(mesh: Mesh, K: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of physical points; K and pts broadcast,
    pts shape (..., 2) with K shape (...)."""
    c = _tri_cache(mesh)
    return c["lam0"][K] + np.einsum("...id,...d->...i", c["lam_grad"][K], pts)


def cell_quadrature(mesh: Mesh, degree: int = 2):
    """Physical quadrature points/weights: returns (pts (nc,nq,2), w (nq,)).

    Integral of f over the whole mesh: ``sum_K |K| sum_q w_q f(pts[K,q])``.
    """
    key = ("cellquad", degree, mesh.d)
    hit = mesh._cache.get(key)
    if hit is not None:
        return hit
    if mesh.kind == "tri":
        bary, w = _TRI_MID if degree <= 2 else _TRI_DEG4
        p = mesh.vertices[mesh.cells]                 # (nc,3,2)
        pts = np.einsum("qi,kid->kqd", bary, p)
    else:
        ref, w = _QUAD_2X2 if degree <= 3 else _QUAD_3X3
        qc = _quad_cache(mesh)
        pts = qc["corner"][:, None, :] + qc["delta"] * ref[None, :, :]
    out = (pts, w.copy())
    mesh._cache[key] = out
    return out


def integrate(mesh: Mesh, values_at_q: np.ndarray, w: np.ndarray) -> float | np.ndarray:
    """Sum |K| * sum_q w_q f_q given per-cell per-point values (nc, nq, ...)."""
    return np.einsum("k,q,kq...->...", mesh.cell_volume, w, values_at_q)


def face_quadrature(mesh: Mesh):
    """3-point Gauss points along every face: (pts (nf,3,d), w (3,))."""
    key = "facequad"
    hit = mesh._cache.get(key)
    if hit is not None:
        return hit
    t, w = _SEG_3
    # parameterize from the face center along the stored tangent
    s = (t - 0.5)[None, :, None] * mesh.face_area[:, None, None]
    pts = mesh.face_center[:, None, :] + s * mesh.face_tangent[:, None, :]
    out = (pts, w.copy())
    mesh._cache[key] = out
    return out


# ---------------------------------------------------------------------------
# interpolation / projection


def _as_callable_values(f, pts):
    """Evaluate a callable on points of shape (..., d); result (..., m) or (...,)."""
    flat = pts.reshape(-1, pts.shape[-1])
    vals = np.asarray(f(flat), dtype=float)
    if vals.shape[0] != flat.shape[0]:
        raise ValueError("field callable must return one value per input point")
    return vals.reshape(pts.shape[:-1] + vals.shape[1:])


def project_Q(mesh: Mesh, f) -> CellField:
    """L2 projection onto piecewise constants (exact cell averages).

    ``f`` may be a callable on points, a CRField (averaged exactly via its
    face dofs), or a CellField (returned as a copy).
    """
    if isinstance(f, CellField):
        return CellField(mesh, f.values.copy())
    if isinstance(f, CRField):
        # the cell average of a CR function is the mean of its face dofs
        return CellField(mesh, f.values[mesh.cell_faces].mean(axis=1))
    pts, w = cell_quadrature(mesh, degree=4)
    vals = _as_callable_values(f, pts)
    avg = np.einsum("q,kq...->k...", w, vals)
    return CellField(mesh, avg)


def interpolate_CR(mesh: Mesh, f) -> CRField:
    """Face-mean interpolation onto the nonconforming linear space."""
    pts, w = face_quadrature(mesh)
    vals = _as_callable_values(f, pts)
    if vals.ndim == 2:  # scalar input: promote to a single component
        vals = vals[..., None]
    dof = np.einsum("q,fq...->f...", w, vals)
    return CRField(mesh, dof)


def interpolate_Nedelec(mesh: Mesh, f) -> EdgeField:
    """Mean tangential dof interpolation onto the edge-element space."""
    pts, w = face_quadrature(mesh)
    vals = _as_callable_values(f, pts)
    tang = np.einsum("fq d,f d->fq", vals, mesh.face_tangent)
    return EdgeField(mesh, np.einsum("q,fq->f", w, tang))


def _potential_mean(mesh: Mesh, vertex_vals: np.ndarray) -> float:
    # exact for P1 (|K| * vertex average) and Q1 (same formula on squares)
    return float(np.dot(mesh.cell_volume, vertex_vals[mesh.cells].mean(axis=1)))


def interpolate_W(mesh: Mesh, f) -> PotentialField:
    """Vertex interpolation, shifted to zero mean."""
    vals = _as_callable_values(f, mesh.vertices)
    vals = vals - _potential_mean(mesh, vals)
    return PotentialField(mesh, vals)


# ---------------------------------------------------------------------------
# discrete differential operators


def grad_h(u: CRField) -> CellField:
    """Broken gradient of a CR field; values (nc, m, d) with G[K,i,j] = d_j u_i."""
    mesh = u.mesh
    c = _tri_cache(mesh)
    # CR basis on face l is 1 - 2 lam_l, so its gradient is -2 lam_grad_l
    dof = u.values[mesh.cell_faces]              # (nc, 3, m)
    if dof.ndim == 2:
        dof = dof[..., None]
    G = np.einsum("kli,klj->kij", dof, -2.0 * c["lam_grad"])
    return CellField(mesh, G)


def div_h(u: CRField) -> CellField:
    G = grad_h(u).values
    return CellField(u.mesh, np.trace(G, axis1=1, axis2=2))


def div_h_pc(u: CellField) -> CellField:
    """FV divergence of a piecewise constant vector on the periodic quad mesh:
    (1/|K|) sum_s |s| {{u}} . n_out."""
    mesh = u.mesh
    if not mesh.periodic:
        raise ValueError("piecewise-constant divergence is defined on the torus mesh")
    kin, kout = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    un = 0.5 * np.einsum("fd,fd->f", u.values[kin] + u.values[kout], mesh.face_normal)
    flux = mesh.face_area * un                  # oriented along stored normal
    cf = mesh.cell_faces
    out = (flux[cf] * mesh.cell_face_out).sum(axis=1) / mesh.cell_volume
    return CellField(mesh, out)


def curl_h(B: EdgeField) -> CellField:
    """Scalar curl per cell via circulation: (1/|K|) sum_s ccw |s| dof_s."""
    mesh = B.mesh
    cf = mesh.cell_faces
    circ = (B.values[cf] * mesh.face_area[cf] * mesh.cell_face_ccw).sum(axis=1)
    return CellField(mesh, circ / mesh.cell_volume)


def grad_W(psi: PotentialField) -> EdgeField:
    """Gradient of a vertex potential, expressed exactly in the edge space.

    The mean tangential component of grad psi along a straight face is
    (psi(end) - psi(start)) / |s| with the endpoints ordered along the
    stored tangent, which is exact for P1/Q1 potentials.
    """
    mesh = psi.mesh
    a, b = mesh.faces[:, 0], mesh.faces[:, 1]
    return EdgeField(mesh, (psi.values[b] - psi.values[a]) / mesh.face_area)


def grad_W_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Sparse matrix of :func:`grad_W`: (nf x nv), dof = (psi_b - psi_a)/|s|."""
    key = "gradW"
    hit = mesh._cache.get(key)
    if hit is not None:
        return hit
    nf = mesh.num_faces
    rows = np.repeat(np.arange(nf), 2)
    cols = mesh.faces[:, :2].ravel()
    vals = (np.column_stack([-1.0 / mesh.face_area, 1.0 / mesh.face_area])).ravel()
    G = sp.csr_matrix((vals, (rows, cols)), shape=(nf, mesh.num_vertices))
    mesh._cache[key] = G
    return G


def trace_jump_avg(values: np.ndarray, mesh: Mesh, faces: np.ndarray | None = None):
    """Per-face traces of cellwise data: returns (f_in, f_out, jump, avg).

    ``values`` is (nc, ...) cell data; ``faces`` defaults to the interior
    faces.  jump = f_out - f_in and avg = (f_in + f_out)/2 with in/out
    fixed by the stored face normal.
    """
    if faces is None:
        faces = mesh.interior_faces
    kin = mesh.face_cells[faces, 0]
    kout = mesh.face_cells[faces, 1]
    f_in = values[kin]
    f_out = values[kout]
    return f_in, f_out, f_out - f_in, 0.5 * (f_in + f_out)


def face_velocity(mesh: Mesh, u) -> np.ndarray:
    """Normal transport velocity on every face (along the stored normal).

    For a CR field this is the face dof dotted with the normal (the exact
    face mean); boundary faces of the no-slip space give zero.  For a
    piecewise constant field it is the face average {{u}} . n.
    """
    if isinstance(u, CRField):
        return np.einsum("fd,fd->f", u.values, mesh.face_normal)
    if isinstance(u, CellField):
        kin, kout = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
        vals = 0.5 * (u.values[kin] + u.values[np.where(kout >= 0, kout, kin)])
        return np.einsum("fd,fd->f", vals, mesh.face_normal)
    raise TypeError(f"no face velocity for {type(u).__name__}")


# ---------------------------------------------------------------------------
# pointwise evaluation of the local representatives


def eval_CR(u: CRField, K: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Evaluate the CR representative of cells K at points pts (..., 2)."""
    mesh = u.mesh
    lam = _barycentric(mesh, K, pts)
    phi = 1.0 - 2.0 * lam                        # basis of face l on slot l
    dof = u.values[mesh.cell_faces[K]]           # (..., 3, m)
    return np.einsum("...l,...lm->...m", phi, dof)


def eval_edge(B: EdgeField, K: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Evaluate the edge-element representative inside cells K."""
    mesh = B.mesh
    dof = B.values[mesh.cell_faces[K]]           # (..., fpc)
    if mesh.kind == "tri":
        c = _tri_cache(mesh)
        lam = _barycentric(mesh, K, pts)
        ia, ib = c["ia"][K], c["ib"][K]
        lam_a = np.take_along_axis(lam, ia, axis=-1)
        lam_b = np.take_along_axis(lam, ib, axis=-1)
        basis = (lam_a[..., None] * c["g_b"][K] - lam_b[..., None] * c["g_a"][K])
        basis = basis * c["flen"][K][..., None]
        return np.einsum("...l,...ld->...d", dof, basis)
    qc = _quad_cache(mesh)
    xh = (pts - qc["corner"][K]) / qc["delta"]   # (..., 2) reference coords
    xh = xh - np.floor(xh + 1e-12)               # torus wrap at the seam
    b, r, t, l = dof[..., 0], dof[..., 1], dof[..., 2], dof[..., 3]
    B1 = b * (1.0 - xh[..., 1]) + t * xh[..., 1]
    B2 = l * (1.0 - xh[..., 0]) + r * xh[..., 0]
    return np.stack([B1, B2], axis=-1)


def eval_W(psi: PotentialField, K: np.ndarray, pts: np.ndarray) -> np.ndarray:
    mesh = psi.mesh
    vv = psi.values[mesh.cells[K]]
    if mesh.kind == "tri":
        lam = _barycentric(mesh, K, pts)
        return np.einsum("...i,...i->...", lam, vv)
    qc = _quad_cache(mesh)
    xh = (pts - qc["corner"][K]) / qc["delta"]
    # torus wrap: points live in [0,1); pull them into the cell's box
    xh = xh - np.floor(xh + 1e-12)
    x, y = xh[..., 0], xh[..., 1]
    shape = np.stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y], axis=-1)
    return np.einsum("...i,...i->...", shape, vv)


def eval_cellfield(c: CellField, K: np.ndarray, pts: np.ndarray) -> np.ndarray:
    vals = c.values[K]
    if vals.ndim == pts.ndim - 1:  # scalar
        return vals
    return vals


# ---------------------------------------------------------------------------
# assembled structures shared by the schemes and diagnostics


def edge_structures(mesh: Mesh) -> dict:
    """Edge-element mass matrix, curl map and load tables (cached).

    Returns dict with ``M`` (nf x nf mass), ``curl`` (nc x nf sparse map so
    that curl_h B = C @ dofs / |K|... stored already divided by |K|), and
    ``midvals`` (nc, fpc, nq, 2): basis values at the scheme-grade
    quadrature points (used for cross-product loads).
    """
    key = "edgestruct"
    hit = mesh._cache.get(key)
    if hit is not None:
        return hit

    nc, nf = mesh.num_cells, mesh.num_faces
    cf = mesh.cell_faces
    fpc = cf.shape[1]
    pts, w = cell_quadrature(mesh, degree=2)
    nq = len(w)

    # basis values at quadrature points, one local dof (one-hot) at a time
    midvals = np.empty((nc, fpc, nq, 2))
    if mesh.kind == "tri":
        c = _tri_cache(mesh)
        lam = _barycentric(mesh, np.arange(nc)[:, None], pts)
    else:
        qc = _quad_cache(mesh)
        xh = (pts - qc["corner"][:, None, :]) / qc["delta"]
    eye = np.eye(fpc)
    for loc in range(fpc):
        if mesh.kind == "tri":
            ia, ib = c["ia"][:, loc], c["ib"][:, loc]
            lam_a = np.take_along_axis(lam, ia[:, None, None], axis=-1)[..., 0]
            lam_b = np.take_along_axis(lam, ib[:, None, None], axis=-1)[..., 0]
            basis = (lam_a[..., None] * c["g_b"][:, None, loc]
                     - lam_b[..., None] * c["g_a"][:, None, loc])
            midvals[:, loc] = basis * c["flen"][:, loc, None, None]
        else:
            one = eye[loc]
            B1 = one[0] * (1 - xh[..., 1]) + one[2] * xh[..., 1]
            B2 = one[3] * (1 - xh[..., 0]) + one[1] * xh[..., 0]
            midvals[:, loc] = np.stack([B1, B2], axis=-1)

    # local mass blocks via quadrature (exact, integrands quadratic)
    loc_mass = np.einsum("k,q,klqd,kmqd->klm", mesh.cell_volume, w, midvals, midvals)
    rows = np.repeat(cf, fpc, axis=1).ravel()
    cols = np.tile(cf, (1, fpc)).ravel()
    M = sp.csr_matrix((loc_mass.ravel(), (rows, cols)), shape=(nf, nf))

    # curl map: per-cell constant curl = sum_l coeff[K,l] dof_l
    if mesh.kind == "tri":
        coeff = _tri_cache(mesh)["whitney_curl"]
    else:
        coeff = mesh.cell_face_ccw * mesh.face_area[cf] / mesh.cell_volume[:, None]
    crows = np.repeat(np.arange(nc), fpc)
    C = sp.csr_matrix((coeff.ravel(), (crows, cf.ravel())), shape=(nc, nf))

    out = dict(M=M, curl=C, midvals=midvals, qw=w, qpts=pts)
    mesh._cache[key] = out
    return out


def cr_structures(mesh: Mesh) -> dict:
    """CR scalar stiffness, divergence and cell-average maps (cached).

    ``S``: (nf x nf) with entries sum_K |K| grad phi_a . grad phi_b;
    ``D``: (nc x 2nf) mapping stacked [ux, uy] dofs to cell divergence;
    ``Q``: (nc x nf) cell-average map (value 1/3 per incident face).
    """
    key = "crstruct"
    hit = mesh._cache.get(key)
    if hit is not None:
        return hit
    c = _tri_cache(mesh)
    nc, nf = mesh.num_cells, mesh.num_faces
    cf = mesh.cell_faces
    g = -2.0 * c["lam_grad"]                     # (nc, 3, 2) CR basis gradients

    loc = np.einsum("k,kld,kmd->klm", mesh.cell_volume, g, g)
    rows = np.repeat(cf, 3, axis=1).ravel()
    cols = np.tile(cf, (1, 3)).ravel()
    S = sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(nf, nf))

    crows = np.repeat(np.arange(nc), 3)
    D = sp.csr_matrix(
        (np.concatenate([g[:, :, 0].ravel(), g[:, :, 1].ravel()]),
         (np.concatenate([crows, crows]), np.concatenate([cf.ravel(), cf.ravel() + nf]))),
        shape=(nc, 2 * nf))

    Q = sp.csr_matrix((np.full(nc * 3, 1.0 / 3.0), (crows, cf.ravel())), shape=(nc, nf))

    out = dict(S=S, D=D, Q=Q)
    mesh._cache[key] = out
    return out


# ---------------------------------------------------------------------------
# serialization


def field_rows(field, name: str):
    """Rows (field, dof id, x, y, components...) for CSV output."""
    mesh = field.mesh
    rows = []
    if isinstance(field, CellField):
        where = mesh.cell_center
        vals = field.values if field.values.ndim > 1 else field.values[:, None]
    elif isinstance(field, (CRField, EdgeField)):
        where = mesh.face_center
        vals = field.values if field.values.ndim > 1 else field.values[:, None]
    elif isinstance(field, PotentialField):
        where = mesh.vertices
        vals = field.values[:, None]
    else:
        raise TypeError(f"cannot serialize {type(field).__name__}")
    for i in range(vals.shape[0]):
        rows.append([name, i, *(float(x) for x in where[i]), *(float(v) for v in vals[i])])
    return rows
