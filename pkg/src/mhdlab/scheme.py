"""Implicit (backward Euler) time steppers for the coupled system.

Two variants:

* ``scheme1`` (triangle mesh, no-slip / perfectly conducting walls):
  piecewise constant density, face-based nonconforming velocity with zero
  boundary dofs, edge-element magnetic field with zero tangential boundary
  dofs.  Continuity is a finite volume update with upwind + h^eps flux;
  momentum is tested against the cell averages of the velocity basis;
  induction is the curl-curl weak form with the transport term
  (u x B_old, curl C).
* ``scheme2`` (periodic quad mesh): piecewise constant density and
  velocity, same magnetic discretization.  Momentum uses central pressure
  and divergence averages plus a face jump penalty mu [[u]]/d_sigma.

Each step solves the nonlinear backward Euler system by eliminating the
density and the magnetic field exactly: given a candidate velocity, the
continuity system is linear in rho (upwind + h^eps diffusion with frozen
transport directions) and the induction system is linear in B (the
transport term uses B from the previous time level), so both are solved
sparse-direct inside every iteration.  The remaining nonlinear residual in
the velocity alone is driven to a 1e-10 relative tolerance by a damped
semismooth Newton method on the full coupled Jacobian (the upwind kink
gets the centered subgradient).  A plain frozen-coefficient fixed-point
sweep on the velocity stalls once the acoustic CFL number dt c / h passes
one, which the dt ~ h regime does hit; the Newton direction restores
convergence there while keeping every sub-solve structure of the sweep.
Because rho and B always come from exact linear solves, total mass and
the weak divergence of B are conserved to solver precision at every
accepted state no matter how the outer iteration ends.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .fespace import (
    CellField, CRField, EdgeField,
    project_Q, interpolate_CR, interpolate_Nedelec,
    face_velocity, cr_structures, edge_structures, grad_W_matrix,
)
from .numerics import Params, pressure, pos_part, neg_part, cross2, validate_epsilon

PICARD_TOL = 1e-10
PICARD_MAXIT = 100


class PositivityLoss(RuntimeError):
    """Density lost positivity (reported, never clipped)."""


class PicardDivergence(RuntimeError):
    """The nonlinear iteration failed to converge."""


class LinearSolveFailure(RuntimeError):
    """A sparse linear solve produced no usable solution."""


@dataclass
class DiscreteState:
    variant: str
    mesh: Mesh
    t: float
    rho: CellField
    u: object            # CRField (scheme1) or vector CellField (scheme2)
    B: EdgeField
    uhat: CellField      # cached cell averages of u

    def copy_with(self, t, rho, u, B, uhat):
        return DiscreteState(self.variant, self.mesh, t, rho, u, B, uhat)


@dataclass
class StepReport:
    t: float
    dt: float
    iterations: int
    residuals: dict
    min_density: float
    wall_time: float
    irregular: bool = False
    solver: str = "splu"


def _solve(A, b, what: str) -> np.ndarray:
    """Direct sparse solve with an honest failure signal."""
    try:
        x = spla.splu(sp.csc_matrix(A)).solve(b)
    except Exception as exc:  # singular factorization, memory, ...
        raise LinearSolveFailure(f"direct solve failed for {what}: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure(f"non-finite solution in {what}")
    return x


# ---------------------------------------------------------------------------
# steppers


class _StepperBase:
    def __init__(self, mesh: Mesh, params: Params, variant: str):
        validate_epsilon(params.gamma, mesh.d, params.eps, variant)
        self.mesh = mesh
        self.params = params
        self.variant = variant
        self.vol = mesh.cell_volume
        self.heps = mesh.h ** params.eps
        self.iface = mesh.interior_faces
        self.kin = mesh.face_cells[self.iface, 0]
        self.kout = mesh.face_cells[self.iface, 1]
        self.siglen = mesh.face_area[self.iface]
        es = edge_structures(mesh)
        self.M_edge = es["M"]
        self.C_curl = es["curl"]
        self.edge_midvals = es["midvals"]
        self.edge_qw = es["qw"]

    # transport operator: (T r)_K = sum over K's interior faces of
    # |s| F(r; vn) oriented outward; column sums vanish (mass conservation)
    def transport(self, vn_interior: np.ndarray) -> sp.csr_matrix:
        a = self.siglen * (pos_part(vn_interior) + self.heps)   # couples to r_in
        b = self.siglen * (neg_part(vn_interior) - self.heps)   # couples to r_out
        rows = np.concatenate([self.kin, self.kin, self.kout, self.kout])
        cols = np.concatenate([self.kin, self.kout, self.kin, self.kout])
        vals = np.concatenate([a, b, -a, -b])
        nc = self.mesh.num_cells
        return sp.csr_matrix((vals, (rows, cols)), shape=(nc, nc))

    def solve_continuity(self, rho_old: np.ndarray, T: sp.csr_matrix, dt: float,
                         t_new: float) -> np.ndarray:
        A = sp.diags(self.vol / dt) + T
        rho = _solve(A, self.vol * rho_old / dt, "continuity")
        m = float(rho.min())
        if m <= 0.0:
            raise PositivityLoss(f"density hit {m:.3e} at t={t_new:.6g}")
        return rho

    def residual_continuity(self, rho, rho_old, vn, dt):
        T = self.transport(vn[self.iface])
        return self.vol * (rho - rho_old) / dt + T @ rho

    # ----- induction pieces shared by both variants

    def _induction_matrix(self, dt: float):
        KN = self.C_curl.T @ sp.diags(self.vol) @ self.C_curl
        A = self.M_edge / dt + self.params.alpha * KN
        self._KN = KN
        return A

    def _edge_at_quad(self, Bdofs: np.ndarray) -> np.ndarray:
        """Values of an edge field at the scheme-grade quad points, (nc, nq, 2)."""
        loc = Bdofs[self.mesh.cell_faces]          # (nc, fpc)
        return np.einsum("kl,klqd->kqd", loc, self.edge_midvals)

    def _induction_load(self, u_at_quad: np.ndarray, B_old: np.ndarray) -> np.ndarray:
        """L_e = sum_K curl(N_e)|_K  *  int_K (u x B_old)."""
        Bq = self._edge_at_quad(B_old)
        s = cross2(u_at_quad, Bq)                   # (nc, nq)
        I = self.vol * np.einsum("q,kq->k", self.edge_qw, s)
        return self.C_curl.T @ I

    def residual_induction_full(self, B, B_old, u_at_quad, dt):
        L = self._induction_load(u_at_quad, B_old)
        return (self.M_edge @ (B - B_old)) / dt + self.params.alpha * (self._KN @ B) - L

    def _dflux_dvn(self, r_in, r_out, vn):
        """d/dvn of |s| F(r; vn) per interior face; the kink at vn = 0
        takes the centered subgradient (matches {{r}})."""
        H = 0.5 * (1.0 + np.sign(vn))
        return self.siglen * (r_in * H + r_out * (1.0 - H))

    # ----- nonlinear step: exact elimination of rho and B + Newton on u

    def step_fields(self, prev: DiscreteState, dt: float):
        """Advance one backward Euler step.

        rho and B are exact linear solves given the velocity iterate; the
        velocity is updated by damped Newton steps of the full coupled
        Jacobian until the momentum residual passes the relative tolerance.
        """
        rho_old = prev.rho.values
        B_old = prev.B.values
        t_new = prev.t + dt
        u = prev.u.values.copy()

        scale_m = max(1.0, float(np.linalg.norm(self._mom_scale_vec(prev, dt))))
        scale_c = max(1.0, float(np.linalg.norm(self.vol * rho_old / dt)))
        scale_b = max(1.0, float(np.linalg.norm(self.M_edge @ B_old) / dt))

        rho, B, T, vn = self._sub_solves(prev, u, dt, t_new)
        rm = self._mom_res(prev, rho, u, B, T, dt)
        phi = float(np.linalg.norm(rm))

        for it in range(1, PICARD_MAXIT + 1):
            if phi / scale_m < PICARD_TOL:
                rc = self.vol * (rho - rho_old) / dt + T @ rho
                rb = self._free_induction_residual(B, B_old, u, dt)
                res = dict(continuity=float(np.linalg.norm(rc)) / scale_c,
                           momentum=phi / scale_m,
                           induction=float(np.linalg.norm(rb)) / scale_b)
                return rho, u, B, it, res
            if not np.isfinite(phi):
                raise PicardDivergence(f"non-finite residual at t={t_new:.6g}")

            J = self.coupled_jacobian(prev, rho, u, B, vn, T, dt)
            rhs = np.zeros(J.shape[0])
            rhs[self.n_rho:self.n_rho + self.n_u] = -rm
            dx = _solve(J, rhs, "coupled newton system")
            du = self._u_from_flat(dx[self.n_rho:self.n_rho + self.n_u])

            # backtracking on the reduced residual norm
            accepted = False
            best = None
            t_ls = 1.0
            for _ in range(8):
                u_t = u + t_ls * du
                try:
                    rho_t, B_t, T_t, vn_t = self._sub_solves(prev, u_t, dt, t_new)
                except PositivityLoss:
                    t_ls *= 0.5
                    continue
                rm_t = self._mom_res(prev, rho_t, u_t, B_t, T_t, dt)
                phi_t = float(np.linalg.norm(rm_t))
                if np.isfinite(phi_t) and phi_t <= (1.0 - 1e-4 * t_ls) * phi:
                    accepted = True
                    break
                if np.isfinite(phi_t) and (best is None or phi_t < best[0]):
                    best = (phi_t, u_t, rho_t, B_t, T_t, vn_t, rm_t)
                t_ls *= 0.5
            if accepted:
                u, rho, B, T, vn, rm, phi = u_t, rho_t, B_t, T_t, vn_t, rm_t, phi_t
            elif best is not None and best[0] < phi:
                phi, u, rho, B, T, vn, rm = best
            else:
                raise PicardDivergence(
                    f"line search found no usable step at t={t_new:.6g}")
        raise PicardDivergence(
            f"no convergence in {PICARD_MAXIT} iterations at t={t_new:.6g}: "
            f"momentum residual {phi / scale_m:.3e}")


class Scheme1Stepper(_StepperBase):
    """Triangle mesh, CR velocity with no-slip dofs, Dirichlet-type walls."""

    def __init__(self, mesh: Mesh, params: Params):
        if mesh.kind != "tri":
            raise ValueError("scheme1 runs on the triangle mesh")
        super().__init__(mesh, params, "scheme1")
        cs = cr_structures(mesh)
        nf = mesh.num_faces
        self.nf = nf
        self.ifree = self.iface                     # free CR faces = interior
        self.nif = len(self.ifree)
        self.S = cs["S"]
        self.D = cs["D"]
        self.Q = cs["Q"]
        # restrictions to the free dofs
        self.S_ff = self.S[self.ifree][:, self.ifree]
        cols = np.concatenate([self.ifree, self.ifree + nf])
        self.D_f = self.D[:, cols]
        self.Q_f = self.Q[:, self.ifree]
        A_B = self._induction_matrix(params.dt)
        self.iedge = self.iface                     # free edges = interior
        self.A_B_ff = A_B[self.iedge][:, self.iedge]
        self.B_lu = spla.splu(sp.csc_matrix(self.A_B_ff))
        self.MB_ff = self.M_edge[self.iedge][:, self.iedge]
        self.M_edge_rows = self.M_edge[self.iedge]
        self.KN_rows = self._KN[self.iedge]
        self._dt_factorized = params.dt
        # unknown layout for the coupled Jacobian: [rho | ux | uy | B]
        self.n_rho = mesh.num_cells
        self.n_u = 2 * self.nif
        self.n_B = len(self.iedge)
        self.free_of_face = np.full(nf, -1)
        self.free_of_face[self.ifree] = np.arange(self.nif)
        self.C_free = sp.csr_matrix(self.C_curl[:, self.iedge])

    # CR velocity at the edge-midpoint quadrature points is just the face dof
    def _u_at_quad(self, uvals: np.ndarray) -> np.ndarray:
        return uvals[self.mesh.cell_faces]          # (nc, 3, 2), q-index == local face

    def uhat(self, uvals: np.ndarray) -> np.ndarray:
        return np.column_stack([self.Q @ uvals[:, 0], self.Q @ uvals[:, 1]])

    def _lorentz_load(self, curlB: np.ndarray, B_old: np.ndarray) -> np.ndarray:
        """Assemble int (curl B x B_old) . (basis) into (nf, 2) dof loads.

        With the edge-midpoint rule the CR basis of face f is 1 at its own
        midpoint and 0 at the others, so the load on dof f collects
        |K|/3 * force(midpoint of f) from both neighboring cells.
        """
        Bq = self._edge_at_quad(B_old)              # (nc, 3, 2)
        force = np.empty_like(Bq)
        force[..., 0] = -curlB[:, None] * Bq[..., 1]
        force[..., 1] = curlB[:, None] * Bq[..., 0]
        w = (self.vol / 3.0)[:, None, None] * force
        load = np.zeros((self.nf, 2))
        np.add.at(load, self.mesh.cell_faces.ravel(), w.reshape(-1, 2))
        return load

    def solve_induction(self, B_old: np.ndarray, u_at_quad: np.ndarray, dt: float) -> np.ndarray:
        L = self._induction_load(u_at_quad, B_old)
        rhs = (self.M_edge_rows @ B_old) / dt + L[self.iedge]
        if dt != self._dt_factorized:
            A = (self.M_edge / dt + self.params.alpha * self._KN)[self.iedge][:, self.iedge]
            x = _solve(A, rhs, "induction")
        else:
            x = self.B_lu.solve(rhs)
            if not np.all(np.isfinite(x)):
                raise LinearSolveFailure("non-finite solution in induction")
        B = np.zeros(self.nf)
        B[self.iedge] = x
        return B

    # ----- hooks for the shared Newton driver

    def _sub_solves(self, prev, u, dt, t_new):
        vn = face_velocity(self.mesh, CRField(self.mesh, u))
        T = self.transport(vn[self.iface])
        rho = self.solve_continuity(prev.rho.values, T, dt, t_new)
        B = self.solve_induction(prev.B.values, self._u_at_quad(u), dt)
        return rho, B, T, vn

    def _mom_res(self, prev, rho, u, B, T, dt):
        return self._momentum_residual(rho, u, B, prev.rho.values,
                                       prev.uhat.values, prev.B.values, T, dt)

    def _mom_scale_vec(self, prev, dt):
        mom = self.vol[:, None] * prev.rho.values[:, None] * prev.uhat.values
        return np.concatenate([self.Q_f.T @ mom[:, 0], self.Q_f.T @ mom[:, 1]]) / dt

    def _u_from_flat(self, flat):
        u = np.zeros((self.nf, 2))
        u[self.ifree, 0] = flat[:self.nif]
        u[self.ifree, 1] = flat[self.nif:]
        return u

    def _free_induction_residual(self, B, B_old, u, dt):
        return self.residual_induction_full(B, B_old, self._u_at_quad(u), dt)[self.iedge]

    def coupled_jacobian(self, prev, rho, u, B, vn, T, dt):
        """Sparse Jacobian of the coupled residual [continuity; momentum;
        induction] w.r.t. [rho; ux; uy; B] at the current iterate."""
        pr = self.params
        nif = self.nif
        vn_i = vn[self.iface]
        nvec = self.mesh.face_normal[self.iface]
        uhat = self.uhat(u)
        Bq_old = self._edge_at_quad(prev.B.values)      # (nc, 3, 2)
        pprime = pr.a * pr.gamma * np.power(rho, pr.gamma - 1.0)

        Jcc = sp.diags(self.vol / dt) + T

        # continuity w.r.t. u: vn of face s depends only on its own CR dof
        dF = self._dflux_dvn(rho[self.kin], rho[self.kout], vn_i)
        sidx = np.arange(nif)
        rows = np.concatenate([self.kin, self.kout, self.kin, self.kout])
        cols = np.concatenate([sidx, sidx, sidx + nif, sidx + nif])
        vals = np.concatenate([dF * nvec[:, 0], -dF * nvec[:, 0],
                               dF * nvec[:, 1], -dF * nvec[:, 1]])
        Jcu = sp.csr_matrix((vals, (rows, cols)),
                            shape=(self.n_rho, self.n_u))

        # momentum w.r.t. rho
        Jmc = sp.vstack([
            self.Q_f.T @ (sp.diags(self.vol * uhat[:, c] / dt) + T @ sp.diags(uhat[:, c]))
            for c in range(2)]) - self.D_f.T @ sp.diags(self.vol * pprime)

        # momentum w.r.t. u: frozen-coefficient part + upwind derivative
        A1 = (self.Q_f.T @ (sp.diags(self.vol * rho / dt) + T @ sp.diags(rho)) @ self.Q_f
              + pr.mu * self.S_ff)
        Jmu = sp.block_diag((A1, A1), format="csr")
        if pr.nu != 0.0:
            Jmu = Jmu + pr.nu * (self.D_f.T @ sp.diags(self.vol) @ self.D_f)
        for c in range(2):
            m = rho * uhat[:, c]
            dFm = self._dflux_dvn(m[self.kin], m[self.kout], vn_i)
            kv = sp.csr_matrix(
                (np.concatenate([dFm * nvec[:, 0], -dFm * nvec[:, 0],
                                 dFm * nvec[:, 1], -dFm * nvec[:, 1]]),
                 (rows, cols)), shape=(self.n_rho, self.n_u))
            Jmu = Jmu + sp.vstack([self.Q_f.T @ kv if cc == c else
                                   sp.csr_matrix((nif, self.n_u)) for cc in range(2)])

        # momentum w.r.t. B through curl B x B_old, assembled per cell/face;
        # the induction transport block is exactly its negative transpose
        cf = self.mesh.cell_faces
        frees = self.free_of_face[cf]                   # (nc, 3)
        keep = frees >= 0
        cells = np.repeat(np.arange(self.mesh.num_cells), 3).reshape(-1, 3)
        w = (self.vol / 3.0)[:, None]
        prow_x = frees[keep]
        pcol = cells[keep]
        val_x = np.broadcast_to(w, (self.mesh.num_cells, 3))[keep] * Bq_old[..., 1][keep]
        val_y = -np.broadcast_to(w, (self.mesh.num_cells, 3))[keep] * Bq_old[..., 0][keep]
        P = sp.csr_matrix(
            (np.concatenate([val_x, val_y]),
             (np.concatenate([prow_x, prow_x + nif]), np.concatenate([pcol, pcol]))),
            shape=(self.n_u, self.n_rho))
        Jmb = P @ self.C_free
        Jbu = -Jmb.T

        Jbb = (self.M_edge / dt + pr.alpha * self._KN)[self.iedge][:, self.iedge]

        return sp.bmat([[Jcc, Jcu, None],
                        [Jmc, Jmu, Jmb],
                        [None, Jbu, Jbb]], format="csc")

    def _momentum_residual(self, rho, u, B, rho_old, uhat_old, B_old, T, dt):
        uhat = self.uhat(u)
        p = pressure(rho, self.params.a, self.params.gamma)
        curlB = self.C_curl @ B
        lor = self._lorentz_load(curlB, B_old)[self.ifree]
        mom_new = self.vol[:, None] * rho[:, None] * uhat
        mom_old = self.vol[:, None] * rho_old[:, None] * uhat_old
        ustack = np.concatenate([u[self.ifree, 0], u[self.ifree, 1]])
        div_u = self.D_f @ ustack
        press = self.D_f.T @ (self.vol * (self.params.nu * div_u - p))
        out = np.empty(2 * self.nif)
        for c in range(2):
            out[c * self.nif:(c + 1) * self.nif] = (
                self.Q_f.T @ ((mom_new[:, c] - mom_old[:, c]) / dt + T @ (rho * uhat[:, c]))
                + self.params.mu * (self.S_ff @ u[self.ifree, c])
                + press[c * self.nif:(c + 1) * self.nif]
                - lor[:, c])
        return out

    def pack_state(self, prev, t, rho, u, B):
        mesh = self.mesh
        return DiscreteState(
            "scheme1", mesh, t,
            CellField(mesh, rho), CRField(mesh, u), EdgeField(mesh, B),
            CellField(mesh, self.uhat(u)))


class Scheme2Stepper(_StepperBase):
    """Periodic quad mesh, fully finite volume flow part."""

    def __init__(self, mesh: Mesh, params: Params):
        if not (mesh.kind == "quad" and mesh.periodic and mesh.d == 2):
            raise ValueError("scheme2 runs on the 2D periodic quad mesh")
        super().__init__(mesh, params, "scheme2")
        nc = mesh.num_cells
        self.nc = nc
        nf = mesh.num_faces
        # face-jump penalty graph Laplacian, weight |s|/d_sigma per face
        wgt = mesh.face_area / mesh.d_sigma
        kin, kout = self.kin, self.kout
        rows = np.concatenate([kin, kin, kout, kout])
        cols = np.concatenate([kin, kout, kin, kout])
        vals = np.concatenate([wgt, -wgt, -wgt, wgt])
        self.J = sp.csr_matrix((vals, (rows, cols)), shape=(nc, nc))
        # divergence map for stacked pc velocity [ux; uy]: contribution of
        # face f is +-|s| {{u}}.n / |K|, the average coupling both cells 1/2
        halfn = 0.5 * mesh.face_area[:, None] * mesh.face_normal   # (nf, 2)
        gr, gc, gv = [], [], []
        for comp in range(2):
            w = halfn[self.iface, comp]
            gr += [kin, kin, kout, kout]
            gc += [kin + comp * nc, kout + comp * nc, kin + comp * nc, kout + comp * nc]
            gv += [w, w, -w, -w]
        G = sp.csr_matrix(
            (np.concatenate(gv), (np.concatenate(gr), np.concatenate(gc))),
            shape=(nc, 2 * nc))
        self.G = sp.diags(1.0 / self.vol) @ G
        A_B = self._induction_matrix(params.dt)
        self.B_lu = spla.splu(sp.csc_matrix(A_B))
        self._dt_factorized = params.dt
        # unknown layout for the coupled Jacobian: [rho | ux | uy | B]
        self.n_rho = nc
        self.n_u = 2 * nc
        self.n_B = nf

    def uhat(self, uvals: np.ndarray) -> np.ndarray:
        return uvals

    def _u_at_quad(self, uvals: np.ndarray) -> np.ndarray:
        nq = len(self.edge_qw)
        return np.repeat(uvals[:, None, :], nq, axis=1)

    def _lorentz_cell(self, curlB: np.ndarray, B_old: np.ndarray) -> np.ndarray:
        """Per-cell integral of curlB x B_old, (nc, 2)."""
        Bq = self._edge_at_quad(B_old)
        mean = np.einsum("q,kqd->kd", self.edge_qw, Bq)
        out = np.empty((self.nc, 2))
        out[:, 0] = -self.vol * curlB * mean[:, 1]
        out[:, 1] = self.vol * curlB * mean[:, 0]
        return out

    def solve_induction(self, B_old: np.ndarray, u_at_quad: np.ndarray, dt: float) -> np.ndarray:
        L = self._induction_load(u_at_quad, B_old)
        rhs = (self.M_edge @ B_old) / dt + L
        if dt != self._dt_factorized:
            A = self.M_edge / dt + self.params.alpha * self._KN
            return _solve(A, rhs, "induction")
        x = self.B_lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise LinearSolveFailure("non-finite solution in induction")
        return x

    def _momentum_residual(self, rho, u, B, rho_old, u_old, B_old, T, dt):
        p = pressure(rho, self.params.a, self.params.gamma)
        curlB = self.C_curl @ B
        lor = self._lorentz_cell(curlB, B_old)
        ustack = np.concatenate([u[:, 0], u[:, 1]])
        div_u = self.G @ ustack
        press = self.G.T @ (self.vol * ((self.params.mu + self.params.lam) * div_u - p))
        out = np.empty(2 * self.nc)
        for c in range(2):
            out[c * self.nc:(c + 1) * self.nc] = (
                self.vol * (rho * u[:, c] - rho_old * u_old[:, c]) / dt
                + T @ (rho * u[:, c])
                + self.params.mu * (self.J @ u[:, c])
                + press[c * self.nc:(c + 1) * self.nc]
                - lor[:, c])
        return out

    # ----- hooks for the shared Newton driver

    def _sub_solves(self, prev, u, dt, t_new):
        vn = face_velocity(self.mesh, CellField(self.mesh, u))
        T = self.transport(vn[self.iface])
        rho = self.solve_continuity(prev.rho.values, T, dt, t_new)
        B = self.solve_induction(prev.B.values, self._u_at_quad(u), dt)
        return rho, B, T, vn

    def _mom_res(self, prev, rho, u, B, T, dt):
        return self._momentum_residual(rho, u, B, prev.rho.values,
                                       prev.u.values, prev.B.values, T, dt)

    def _mom_scale_vec(self, prev, dt):
        return (self.vol[:, None] * prev.rho.values[:, None] * prev.u.values).ravel() / dt

    def _u_from_flat(self, flat):
        return np.column_stack([flat[:self.nc], flat[self.nc:]])

    def _free_induction_residual(self, B, B_old, u, dt):
        return self.residual_induction_full(B, B_old, self._u_at_quad(u), dt)

    def coupled_jacobian(self, prev, rho, u, B, vn, T, dt):
        pr = self.params
        nc = self.nc
        vn_i = vn[self.iface]
        nvec = self.mesh.face_normal[self.iface]
        Bq_old = self._edge_at_quad(prev.B.values)
        Bbar_old = np.einsum("q,kqd->kd", self.edge_qw, Bq_old)   # (nc, 2)
        pprime = pr.a * pr.gamma * np.power(rho, pr.gamma - 1.0)

        Jcc = sp.diags(self.vol / dt) + T

        # vn of a face averages both neighbor velocities: chain factor n_c/2
        def upwind_block(r_field):
            dF = self._dflux_dvn(r_field[self.kin], r_field[self.kout], vn_i)
            rows, cols, vals = [], [], []
            for c in range(2):
                for nb in (self.kin, self.kout):
                    rows += [self.kin, self.kout]
                    cols += [nb + c * nc, nb + c * nc]
                    vals += [0.5 * dF * nvec[:, c], -0.5 * dF * nvec[:, c]]
            return sp.csr_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(nc, 2 * nc))

        Jcu = upwind_block(rho)

        Jmc = sp.vstack([
            sp.diags(self.vol * u[:, c] / dt) + T @ sp.diags(u[:, c])
            for c in range(2)]) - self.G.T @ sp.diags(self.vol * pprime)

        A1 = (sp.diags(self.vol * rho / dt) + T @ sp.diags(rho)
              + pr.mu * self.J)
        Jmu = sp.block_diag((A1, A1), format="csr")
        Jmu = Jmu + (pr.mu + pr.lam) * (self.G.T @ sp.diags(self.vol) @ self.G)
        for c in range(2):
            kv = upwind_block(rho * u[:, c])
            Jmu = Jmu + sp.vstack([kv if cc == c else sp.csr_matrix((nc, 2 * nc))
                                   for cc in range(2)])

        # Lorentz force is linear in curl B; induction transport is the
        # negative transpose of this block
        Jmb = sp.vstack([sp.diags(self.vol * Bbar_old[:, 1]) @ self.C_curl,
                         sp.diags(-self.vol * Bbar_old[:, 0]) @ self.C_curl])
        Jbu = -Jmb.T

        Jbb = self.M_edge / dt + pr.alpha * self._KN

        return sp.bmat([[Jcc, Jcu, None],
                        [Jmc, Jmu, Jmb],
                        [None, Jbu, Jbb]], format="csc")

    def pack_state(self, prev, t, rho, u, B):
        mesh = self.mesh
        uc = CellField(mesh, u)
        return DiscreteState("scheme2", mesh, t,
                             CellField(mesh, rho), uc, EdgeField(mesh, B),
                             CellField(mesh, u.copy()))


def get_stepper(mesh: Mesh, params: Params, variant: str):
    key = ("stepper", variant, params)
    hit = mesh._cache.get(key)
    if hit is None:
        hit = Scheme1Stepper(mesh, params) if variant == "scheme1" else Scheme2Stepper(mesh, params)
        mesh._cache[key] = hit
    return hit


# ---------------------------------------------------------------------------
# public driver API


def initial_state(mesh: Mesh, variant: str, rho0, u0, B0) -> DiscreteState:
    """Project initial data onto the discrete spaces.

    rho0, u0, B0 are callables on points.  The magnetic interpolant is
    Helmholtz-cleaned: one potential-space Poisson solve removes its
    discrete gradient part, so the initial field is weakly divergence free
    (residual at the linear solver tolerance), a property the schemes then
    preserve step by step.
    """
    if variant not in ("scheme1", "scheme2"):
        raise ValueError(f"unknown variant {variant!r}")
    rho = project_Q(mesh, rho0)
    if np.min(rho.values) <= 0.0:
        raise PositivityLoss(f"initial density min {rho.values.min():.3e} <= 0")

    Bf = interpolate_Nedelec(mesh, B0)
    if variant == "scheme1":
        u = interpolate_CR(mesh, u0)
        u.values[mesh.boundary_faces] = 0.0
        Bf.values[mesh.boundary_faces] = 0.0
        free_vertices = mesh.interior_vertices
    else:
        u = project_Q(mesh, u0)
        free_vertices = np.arange(mesh.num_vertices - 1)  # pin the last hat

    # divergence cleaning: subtract the discrete gradient part of B
    G = grad_W_matrix(mesh)[:, free_vertices]
    M = edge_structures(mesh)["M"]
    A = (G.T @ M @ G).tocsc()
    r = G.T @ (M @ Bf.values)
    q = _solve(A, r, "divergence cleaning")
    Bf.values = Bf.values - G @ q

    if variant == "scheme1":
        uhat = CellField(mesh, np.column_stack([
            cr_structures(mesh)["Q"] @ u.values[:, 0],
            cr_structures(mesh)["Q"] @ u.values[:, 1]]))
    else:
        uhat = CellField(mesh, u.values.copy())
    return DiscreteState(variant, mesh, 0.0, rho, u, Bf, uhat)


def step(prev: DiscreteState, params: Params, dt: float | None = None):
    """Advance one backward Euler step; returns (state, StepReport)."""
    stepper = get_stepper(prev.mesh, params, prev.variant)
    use_dt = params.dt if dt is None else dt
    t0 = time.perf_counter()
    rho, u, B, iters, res = stepper.step_fields(prev, use_dt)
    wall = time.perf_counter() - t0
    state = stepper.pack_state(prev, prev.t + use_dt, rho, u, B)
    report = StepReport(
        t=state.t, dt=use_dt, iterations=iters, residuals=res,
        min_density=float(rho.min()), wall_time=wall,
        irregular=(dt is not None and abs(use_dt - params.dt) > 1e-14 * params.dt))
    return state, report


def run(initial: DiscreteState, params: Params):
    """March to T = params.T; returns (states, reports) including t=0.

    The step count is round(T/dt); if that leaves a gap a final shortened
    step is taken and flagged irregular (per-step energy identity checks
    skip it since the prefactorized dt changes).
    """
    states = [initial]
    reports = []
    nsteps = int(round(params.T / params.dt))
    nsteps = max(nsteps, 0)
    while nsteps * params.dt > params.T + 1e-12 * params.T:
        nsteps -= 1
    cur = initial
    for _ in range(nsteps):
        cur, rep = step(cur, params)
        states.append(cur)
        reports.append(rep)
    rest = params.T - nsteps * params.dt
    if rest > 1e-12 * max(params.T, 1.0):
        cur, rep = step(cur, params, dt=rest)
        states.append(cur)
        reports.append(rep)
    return states, reports


def residual_continuity(state: DiscreteState, prev: DiscreteState, params: Params) -> np.ndarray:
    """Weak continuity residual per cell for the step prev -> state."""
    st = get_stepper(state.mesh, params, state.variant)
    vn = face_velocity(state.mesh, state.u)
    dt = state.t - prev.t
    return st.residual_continuity(state.rho.values, prev.rho.values, vn, dt)


def residual_momentum(state: DiscreteState, prev: DiscreteState, params: Params) -> np.ndarray:
    """Weak momentum residual on the free velocity dofs."""
    st = get_stepper(state.mesh, params, state.variant)
    dt = state.t - prev.t
    vn = face_velocity(state.mesh, state.u)
    T = st.transport(vn[st.iface])
    if state.variant == "scheme1":
        return st._momentum_residual(state.rho.values, state.u.values, state.B.values,
                                     prev.rho.values, prev.uhat.values, prev.B.values, T, dt)
    return st._momentum_residual(state.rho.values, state.u.values, state.B.values,
                                 prev.rho.values, prev.u.values, prev.B.values, T, dt)


def residual_induction(state: DiscreteState, prev: DiscreteState, params: Params) -> np.ndarray:
    """Weak induction residual on the free edge dofs."""
    st = get_stepper(state.mesh, params, state.variant)
    dt = state.t - prev.t
    if state.variant == "scheme1":
        uq = st._u_at_quad(state.u.values)
        return st.residual_induction_full(state.B.values, prev.B.values, uq, dt)[st.iedge]
    uq = st._u_at_quad(state.u.values)
    return st.residual_induction_full(state.B.values, prev.B.values, uq, dt)
