"""Measurements of everything the schemes promise.

* per-step energy report: assembles the kinetic/internal/magnetic energies,
  the physical dissipation rates and the five numerical dissipation terms,
  and evaluates the energy identity (exact mode at gamma = 2, inequality
  slack otherwise);
* relative energy against an analytic reference triple;
* weak divergence residual of the magnetic field against the discrete
  potential basis, and the smooth-potential residual used in refinement
  studies;
* renormalized continuity residual for quadratic renormalizations;
* consistency residuals of the four weak-form equations for a fixed family
  of smooth separable space-time test functions, plus EOC fitting.

All scheme-side integrands are polynomials integrated exactly by the
fixed rules in :mod:`mhdlab.fespace`; smooth test functions are integrated
with the same rules (their quadrature error is far below the measured
residual signal).  In time the discrete trajectory is the right-continuous
piecewise-constant interpolant, so every time integral factorizes into a
per-slab spatial pairing times an exact integral of the separable time
bump (for the time-derivative terms, of its derivative, which telescopes
exactly for constant trajectories).
"""

import csv
from dataclasses import dataclass

import numpy as np

from .fespace import (
    CellField, CRField, EdgeField,
    cell_quadrature, grad_h, div_h, div_h_pc, curl_h,
    eval_CR, eval_edge, face_velocity, edge_structures, grad_W_matrix,
    trace_jump_avg, field_rows,
)
from .numerics import (
    Params, pressure, pressure_potential, stress, pos_part, neg_part,
)
from .scheme import DiscreteState


# ---------------------------------------------------------------------------
# energy bookkeeping


@dataclass
class EnergyReport:
    t: float
    dt: float
    kinetic: float
    internal: float
    magnetic: float
    total: float
    mass: float
    min_density: float
    dEdt: float
    viscous: float        # mu |grad u|^2 (scheme1) or jump form (scheme2)
    divdiss: float        # nu |div u|^2 resp. (mu+lam) |div u|^2
    resistive: float      # alpha |curl B|^2
    D1: float
    D2: float
    D3: float             # NaN unless gamma == 2
    D4: float
    D5: float             # NaN unless gamma == 2
    identity_residual: float   # energy units: dt * |sum of all rates|
    inequality_slack: float    # dE + dt*(computable nonnegative rates) <= 0
    gamma_exact: bool
    D4_faces: np.ndarray = None
    D5_faces: np.ndarray = None


def energy_parts(state: DiscreteState, params: Params):
    rho = state.rho.values
    vol = state.mesh.cell_volume
    kinetic = 0.5 * float(np.sum(vol * rho * np.sum(state.uhat.values ** 2, axis=1)))
    internal = float(np.sum(vol * pressure_potential(rho, params.a, params.gamma)))
    M = edge_structures(state.mesh)["M"]
    magnetic = 0.5 * float(state.B.values @ (M @ state.B.values))
    return kinetic, internal, magnetic


def total_energy(state: DiscreteState, params: Params) -> float:
    """E_h = 1/2 int rho |u_avg|^2 + int H(rho) + 1/2 int |B|^2, exact."""
    return sum(energy_parts(state, params))


def total_mass(state: DiscreteState) -> float:
    return float(np.dot(state.mesh.cell_volume, state.rho.values))


def _viscous_rates(state: DiscreteState, params: Params):
    mesh = state.mesh
    if state.variant == "scheme1":
        G = grad_h(state.u).values
        visc = params.mu * float(np.sum(mesh.cell_volume * np.sum(G ** 2, axis=(1, 2))))
        div = div_h(state.u).values
        divdiss = params.nu * float(np.sum(mesh.cell_volume * div ** 2))
    else:
        fi = mesh.interior_faces
        _, _, jump, _ = trace_jump_avg(state.u.values, mesh, fi)
        w = mesh.face_area[fi] / mesh.d_sigma[fi]
        visc = params.mu * float(np.sum(w * np.sum(jump ** 2, axis=1)))
        div = div_h_pc(state.u).values
        divdiss = (params.mu + params.lam) * float(np.sum(mesh.cell_volume * div ** 2))
    return visc, divdiss


def energy_report(prev: DiscreteState, next_: DiscreteState, params: Params) -> EnergyReport:
    """Assemble every term of the per-step energy balance independently.

    The balance reads dE/dt + viscous + divdiss + resistive + D1..D5 = 0
    per step, with all rates evaluated at the new time level except the
    old density/velocity inside D1 and the backward differences inside
    D1..D3.  At gamma = 2 the convexity remainders D3/D5 have closed
    forms and the identity is exact; otherwise they are reported NaN and
    only the inequality slack (which omits them) is meaningful.
    """
    mesh = next_.mesh
    dt = next_.t - prev.t
    vol = mesh.cell_volume
    a, gamma = params.a, params.gamma

    kin, internal, mag = energy_parts(next_, params)
    E_new = kin + internal + mag
    E_old = total_energy(prev, params)
    dEdt = (E_new - E_old) / dt

    visc, divdiss = _viscous_rates(next_, params)
    omega = curl_h(next_.B).values
    resistive = params.alpha * float(np.sum(vol * omega ** 2))

    rho_n, rho_o = next_.rho.values, prev.rho.values
    duhat = next_.uhat.values - prev.uhat.values
    D1 = 0.5 / dt * float(np.sum(vol * rho_o * np.sum(duhat ** 2, axis=1)))
    M = edge_structures(mesh)["M"]
    dB = next_.B.values - prev.B.values
    D2 = 0.5 / dt * float(dB @ (M @ dB))

    fi = mesh.interior_faces
    siglen = mesh.face_area[fi]
    vn = face_velocity(mesh, next_.u)[fi]
    r_in, r_out, rjump, ravg = trace_jump_avg(rho_n, mesh, fi)
    _, _, ujump, _ = trace_jump_avg(next_.uhat.values, mesh, fi)
    heps = mesh.h ** params.eps
    rho_up_absv = r_in * pos_part(vn) - r_out * neg_part(vn)   # rho_up * |vn|
    D4_faces = siglen * (0.5 * rho_up_absv + heps * ravg) * np.sum(ujump ** 2, axis=1)
    D4 = float(D4_faces.sum())

    if gamma == 2.0:
        # H'' = 2a is constant: the mean-value remainders are exact
        D3 = a / dt * float(np.sum(vol * (rho_n - rho_o) ** 2))
        D5_faces = 2.0 * a * siglen * rjump ** 2 * (heps + 0.5 * np.abs(vn))
        D5 = float(D5_faces.sum())
        residual = dt * abs(dEdt + visc + divdiss + resistive + D1 + D2 + D3 + D4 + D5)
        slack = E_new - E_old + dt * (visc + divdiss + resistive + D1 + D2 + D4)
    else:
        D3 = float("nan")
        D5 = float("nan")
        D5_faces = None
        residual = float("nan")
        slack = E_new - E_old + dt * (visc + divdiss + resistive + D1 + D2 + D4)

    return EnergyReport(
        t=next_.t, dt=dt, kinetic=kin, internal=internal, magnetic=mag,
        total=E_new, mass=total_mass(next_), min_density=float(rho_n.min()),
        dEdt=dEdt, viscous=visc, divdiss=divdiss, resistive=resistive,
        D1=D1, D2=D2, D3=D3, D4=D4, D5=D5,
        identity_residual=residual, inequality_slack=slack,
        gamma_exact=(gamma == 2.0), D4_faces=D4_faces, D5_faces=D5_faces)


def relative_energy(state: DiscreteState, params: Params, r, U, b) -> float:
    """Distance to a reference triple (r, U, b) in the relative-energy sense:

    int [ 1/2 rho |u_avg - U|^2 + 1/2 |B - b|^2
          + H(rho) - H(r) - H'(r)(rho - r) ].

    r, U, b are callables on points or constants; r must be positive.
    """
    mesh = state.mesh
    pts, w = cell_quadrature(mesh, degree=4)
    nc, nq, _ = pts.shape
    flat = pts.reshape(-1, 2)

    def ev(f, m):
        if callable(f):
            out = np.asarray(f(flat), dtype=float).reshape(nc, nq, -1)
        else:
            out = np.broadcast_to(np.atleast_1d(np.asarray(f, dtype=float)), (nc, nq, m)).copy()
        return out[..., 0] if m == 1 else out

    rv = ev(r, 1)
    if np.min(rv) <= 0.0:
        raise ValueError(f"reference density must be positive, min was {rv.min():.3e}")
    Uv = ev(U, 2)
    bv = ev(b, 2)

    rho = state.rho.values[:, None]
    uhat = state.uhat.values[:, None, :]
    Bq = eval_edge(state.B, np.arange(nc)[:, None], pts)

    a, gamma = params.a, params.gamma
    dH = a * gamma / (gamma - 1.0) * rv ** (gamma - 1.0)
    dens = (0.5 * rho * np.sum((uhat - Uv) ** 2, axis=-1)
            + 0.5 * np.sum((Bq - bv) ** 2, axis=-1)
            + pressure_potential(rho, a, gamma) - pressure_potential(rv, a, gamma)
            - dH * (rho - rv))
    return float(np.einsum("k,q,kq->", mesh.cell_volume, w, dens))


# ---------------------------------------------------------------------------
# divergence bookkeeping


def weak_divfree_residual(B: EdgeField) -> float:
    """Largest |int B . grad psi| over the discrete potential basis.

    On the torus every vertex hat is admissible; on the wall-bounded mesh
    the admissible potentials are the interior-vertex hats (their gradients
    have zero tangential trace and hence are valid induction test
    functions -- boundary hats are not, and their residuals drift even for
    exact solutions of the continuous problem).
    """
    mesh = B.mesh
    G = grad_W_matrix(mesh)
    M = edge_structures(mesh)["M"]
    r = G.T @ (M @ B.values)
    verts = mesh.interior_vertices if not mesh.periodic else np.arange(mesh.num_vertices)
    if len(verts) == 0:
        return 0.0
    return float(np.max(np.abs(r[verts])))


def smooth_divfree_residual(B: EdgeField, grad_psi) -> float:
    """|int B . grad psi| for a smooth potential (refinement-study probe)."""
    mesh = B.mesh
    pts, w = cell_quadrature(mesh, degree=2)
    nc = mesh.num_cells
    Bq = eval_edge(B, np.arange(nc)[:, None], pts)
    gp = np.asarray(grad_psi(pts.reshape(-1, 2))).reshape(nc, len(w), 2)
    return abs(float(np.einsum("k,q,kqd,kqd->", mesh.cell_volume, w, Bq, gp)))


def renormalized_residual(prev: DiscreteState, next_: DiscreteState, params: Params,
                          b, db, d2b: float) -> float:
    """Defect of the renormalized continuity balance for b with constant b''.

    Checks, for the accepted step prev -> next,
      int [ D_t b(rho) + (rho b'(rho) - b(rho)) div_h u ]
        + dt/2 int b'' |D_t rho|^2
        + sum_faces |s| b'' [[rho]]^2 (h^eps + |u_n|/2)  =  0.
    Exact (solver tolerance) when b'' is constant, e.g. b = rho^2.
    """
    mesh = next_.mesh
    dt = next_.t - prev.t
    vol = mesh.cell_volume
    rho_n, rho_o = next_.rho.values, prev.rho.values
    div = div_h(next_.u).values if next_.variant == "scheme1" else div_h_pc(next_.u).values
    lhs = float(np.sum(vol * ((b(rho_n) - b(rho_o)) / dt
                              + (rho_n * db(rho_n) - b(rho_n)) * div)))
    taylor = 0.5 * dt * d2b * float(np.sum(vol * ((rho_n - rho_o) / dt) ** 2))
    fi = mesh.interior_faces
    vn = face_velocity(mesh, next_.u)[fi]
    _, _, rjump, _ = trace_jump_avg(rho_n, mesh, fi)
    heps = mesh.h ** params.eps
    faceterm = float(np.sum(mesh.face_area[fi] * d2b * rjump ** 2
                            * (heps + 0.5 * np.abs(vn))))
    return abs(lhs + taylor + faceterm)


# ---------------------------------------------------------------------------
# smooth test functions for the consistency residuals


@dataclass
class ScalarTest:
    name: str
    val: object     # pts (...,2) -> (...)
    grad: object    # pts (...,2) -> (...,2)


@dataclass
class VectorTest:
    name: str
    val: object     # pts -> (...,2)
    jac: object     # pts -> (...,2,2), jac[...,i,j] = d_j v_i


def _trig(kind: str, k: int):
    """1D factor and its derivative; k = 0 means the constant 1."""
    if k == 0:
        return (lambda s: np.ones_like(s)), (lambda s: np.zeros_like(s))
    w = 2.0 * np.pi * k
    if kind == "cos":
        return (lambda s: np.cos(w * s)), (lambda s: -w * np.sin(w * s))
    return (lambda s: np.sin(w * s)), (lambda s: w * np.cos(w * s))


def _sep_scalar(name, kx, kindx, ky, kindy) -> ScalarTest:
    fx, dfx = _trig(kindx, kx)
    fy, dfy = _trig(kindy, ky)

    def val(p):
        return fx(p[..., 0]) * fy(p[..., 1])

    def grad(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([dfx(x) * fy(y), fx(x) * dfy(y)], axis=-1)

    return ScalarTest(name, val, grad)


def _pair_vector(name, s1: ScalarTest, s2: ScalarTest) -> VectorTest:
    def val(p):
        return np.stack([s1.val(p), s2.val(p)], axis=-1)

    def jac(p):
        return np.stack([s1.grad(p), s2.grad(p)], axis=-2)

    return VectorTest(name, val, jac)


def _enveloped(v: VectorTest) -> VectorTest:
    """Multiply by sin^2(pi x) sin^2(pi y): vanishes (to first order) on the
    walls, the compact-support surrogate for the momentum tests."""
    def env(p):
        return np.sin(np.pi * p[..., 0]) ** 2 * np.sin(np.pi * p[..., 1]) ** 2

    def genv(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([
            np.pi * np.sin(2 * np.pi * x) * np.sin(np.pi * y) ** 2,
            np.pi * np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * y),
        ], axis=-1)

    def val(p):
        return env(p)[..., None] * v.val(p)

    def jac(p):
        return (env(p)[..., None, None] * v.jac(p)
                + v.val(p)[..., :, None] * genv(p)[..., None, :])

    return VectorTest(v.name + "*env", val, jac)


@dataclass
class TestFamily:
    scalars: list       # for the continuity residual e1
    momentum: list      # VectorTest, e2
    induction: list     # VectorTest with zero tangential boundary trace, e3
    potentials: list    # ScalarTest, zero mean, e4
    T: float

    def bump(self, t):
        """cos^2(pi t / 2T): equals 1 at t=0 and vanishes with its first
        derivative at t=T, so the test functions are supported in [0, T)."""
        return np.cos(np.pi * t / (2.0 * self.T)) ** 2

    def bump_slab(self, t0, t1):
        """Exact integral of the bump over [t0, t1].

        cos^2(pi t / 2T) = (1 + cos(pi t / T)) / 2 has the antiderivative
        t/2 + (T / 2pi) sin(pi t / T)."""
        def anti(t):
            return 0.5 * t + self.T / (2.0 * np.pi) * np.sin(np.pi * t / self.T)
        return anti(t1) - anti(t0)


def default_family(variant: str, T: float) -> TestFamily:
    S = _sep_scalar
    scalars = [
        S("1", 0, "cos", 0, "cos"),
        S("cx", 1, "cos", 0, "cos"),
        S("sy", 0, "cos", 1, "sin"),
        S("cxcy", 1, "cos", 1, "cos"),
        S("sxsy", 1, "sin", 1, "sin"),
        S("c2xcy", 2, "cos", 1, "cos"),
    ]
    momentum = [
        _pair_vector("m1", S("", 0, "cos", 1, "cos"), S("", 0, "cos", 0, "sin")),
        _pair_vector("m2", S("", 0, "sin", 0, "sin"), S("", 1, "sin", 0, "cos")),
        _pair_vector("m3", S("", 1, "cos", 1, "cos"), S("", 1, "sin", 1, "sin")),
        _pair_vector("m4", S("", 0, "cos", 1, "sin"), S("", 1, "cos", 0, "cos")),
        _pair_vector("m5", S("", 1, "sin", 1, "cos"), S("", 1, "cos", 1, "sin")),
        _pair_vector("m6", S("", 0, "cos", 2, "cos"), S("", 2, "sin", 0, "cos")),
    ]
    if variant == "scheme1":
        momentum = [_enveloped(v) for v in momentum]

    def cs(kx, ky):   # cos(2pi kx x) sin(2pi ky y)
        return S("", kx, "cos", ky, "sin")

    def sc(kx, ky):
        return S("", kx, "sin", ky, "cos")

    zerof = ScalarTest("0", lambda p: np.zeros(p.shape[:-1]),
                       lambda p: np.zeros(p.shape[:-1] + (2,)))
    induction = [
        _pair_vector("i1", cs(1, 1), sc(1, 1)),
        _pair_vector("i2", cs(1, 1), ScalarTest("", lambda p: -sc(1, 1).val(p),
                                                lambda p: -sc(1, 1).grad(p))),
        _pair_vector("i3", cs(2, 1), sc(1, 2)),
        _pair_vector("i4", cs(1, 2), sc(2, 1)),
        _pair_vector("i5", zerof, sc(1, 1)),
        _pair_vector("i6", cs(1, 1), zerof),
    ]
    if variant == "scheme1":
        potentials = [
            S("p11", 1, "sin", 1, "sin"),
            S("p12", 1, "sin", 2, "sin"),
            S("p21", 2, "sin", 1, "sin"),
            S("p22", 2, "sin", 2, "sin"),
            S("p13", 1, "sin", 3, "sin"),
            S("p31", 3, "sin", 1, "sin"),
        ]
    else:
        potentials = [
            S("q1", 1, "cos", 0, "cos"),
            S("q2", 0, "cos", 1, "sin"),
            S("q3", 1, "cos", 1, "cos"),
            S("q4", 1, "sin", 1, "sin"),
            S("q5", 2, "cos", 0, "cos"),
            S("q6", 1, "sin", 1, "cos"),
        ]
    return TestFamily(scalars, momentum, induction, potentials, T)


# ---------------------------------------------------------------------------
# consistency residuals


@dataclass
class LevelResiduals:
    h: float
    n: int
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    e4: np.ndarray

    def maxima(self):
        return (float(self.e1.max()), float(self.e2.max()),
                float(self.e3.max()), float(self.e4.max()))


@dataclass
class ConsistencyReport:
    levels: list
    eoc: dict | None = None   # {"e1": slope or "exact", ...} when >= 3 levels

    def fit(self):
        if len(self.levels) < 3:
            raise ValueError(f"EOC fit needs >= 3 levels, got {len(self.levels)}")
        hs = [lv.h for lv in self.levels]
        out = {}
        for i, name in enumerate(("e1", "e2", "e3", "e4")):
            errs = [lv.maxima()[i] for lv in self.levels]
            out[name] = eoc(errs, hs)
        self.eoc = out
        return out


def _state_tables(state: DiscreteState, params: Params):
    """Discrete data at the scheme-grade quadrature points."""
    mesh = state.mesh
    pts, w = cell_quadrature(mesh, degree=2)
    nc, nq, _ = pts.shape
    ar = np.arange(nc)[:, None]
    rho = state.rho.values
    out = dict(pts=pts, w=w, rho=rho,
               p=pressure(rho, params.a, params.gamma),
               uhat=state.uhat.values,
               B=eval_edge(state.B, ar, pts),
               omega=curl_h(state.B).values)
    if state.variant == "scheme1":
        out["u"] = eval_CR(state.u, ar, pts)
        out["S"] = stress(grad_h(state.u).values, params)
    else:
        out["u"] = np.broadcast_to(state.u.values[:, None, :], (nc, nq, 2))
        out["div"] = div_h_pc(state.u).values
    return out


def consistency_residuals(states: list, params: Params,
                          family: TestFamily | None = None) -> ConsistencyReport:
    """Weak-form residuals of a trajectory against the test family.

    e1: continuity; e2: momentum; e3: induction; e4: magnetic divergence
    against smooth potentials (no time integral, max over steps).  For the
    periodic variant the momentum viscous pairing uses the scheme's own
    jump form against cell averages of the test function (a piecewise
    constant velocity has no broken gradient).
    """
    if family is None:
        family = default_family(states[0].variant, states[-1].t)
    mesh = states[0].mesh
    vol = mesh.cell_volume
    pts, w = cell_quadrature(mesh, degree=2)
    nc, nq, _ = pts.shape
    flat = pts.reshape(-1, 2)
    variant = states[0].variant

    def cellint(dens):
        # dens: (nc, nq) pointwise values -> integral over the domain
        return float(np.einsum("k,q,kq->", vol, w, dens))

    # spatial tables of the test functions (time independent)
    sc_tabs = [dict(val=s.val(flat).reshape(nc, nq),
                    grad=s.grad(flat).reshape(nc, nq, 2)) for s in family.scalars]
    mom_tabs = []
    for v in family.momentum:
        tab = dict(val=v.val(flat).reshape(nc, nq, 2),
                   jac=v.jac(flat).reshape(nc, nq, 2, 2))
        tab["div"] = np.trace(tab["jac"], axis1=-2, axis2=-1)
        if variant == "scheme2":
            vbar = np.einsum("q,kqd->kd", w, tab["val"])   # cell averages
            tab["vbar"] = vbar
            _, _, vjump, _ = trace_jump_avg(vbar, mesh, mesh.interior_faces)
            tab["vbar_jump"] = vjump
            tab["vbar_div"] = div_h_pc(CellField(mesh, vbar)).values
        mom_tabs.append(tab)
    ind_tabs = []
    for v in family.induction:
        jac = v.jac(flat).reshape(nc, nq, 2, 2)
        ind_tabs.append(dict(val=v.val(flat).reshape(nc, nq, 2),
                             curl=jac[..., 1, 0] - jac[..., 0, 1]))
    pot_tabs = [dict(grad=s.grad(flat).reshape(nc, nq, 2)) for s in family.potentials]

    e1 = np.zeros(len(sc_tabs))
    e2 = np.zeros(len(mom_tabs))
    e3 = np.zeros(len(ind_tabs))
    e4 = np.zeros(len(pot_tabs))

    tabs0 = _state_tables(states[0], params)
    for i, t in enumerate(pot_tabs):
        e4[i] = abs(np.einsum("k,q,kqd,kqd->", vol, w, tabs0["B"], t["grad"]))

    fi = mesh.interior_faces
    wjump = mesh.face_area[fi] / mesh.d_sigma[fi]

    for k in range(1, len(states)):
        st = states[k]
        tabs = _state_tables(st, params)
        # the discrete solution is constant on the slab (t_{k-1}, t_k], so
        # every time integral factorizes: spatial pairing times the exact
        # integral of the time bump (or of its derivative, a telescope)
        dchi = family.bump(st.t) - family.bump(states[k - 1].t)
        chi_int = family.bump_slab(states[k - 1].t, st.t)

        rho_q = tabs["rho"][:, None]
        for i, tab in enumerate(sc_tabs):
            dt_term = cellint(rho_q * tab["val"]) * dchi
            adv = cellint(rho_q * np.einsum("kqd,kqd->kq", tabs["u"], tab["grad"])) * chi_int
            e1[i] += dt_term + adv

        mom_q = tabs["rho"][:, None, None] * tabs["uhat"][:, None, :]   # rho uhat
        for i, tab in enumerate(mom_tabs):
            dt_term = cellint(np.einsum("kqd,kqd->kq", mom_q, tab["val"])) * dchi
            conv = cellint(np.einsum("kqi,kqj,kqij->kq",
                                     mom_q, tabs["u"], tab["jac"])) * chi_int
            pdiv = cellint(tabs["p"][:, None] * tab["div"]) * chi_int
            if variant == "scheme1":
                soft = cellint(np.einsum("kij,kqij->kq", tabs["S"], tab["jac"])) * chi_int
            else:
                _, _, ujmp, _ = trace_jump_avg(st.u.values, mesh, fi)
                soft = (params.mu * float(np.sum(wjump * np.sum(ujmp * tab["vbar_jump"], axis=1)))
                        + (params.mu + params.lam)
                        * float(np.sum(vol * tabs["div"] * tab["vbar_div"]))) * chi_int
            lor = cellint(tabs["omega"][:, None]
                          * (tabs["B"][..., 0] * tab["val"][..., 1]
                             - tabs["B"][..., 1] * tab["val"][..., 0])) * chi_int
            e2[i] += dt_term + conv + pdiv - soft + lor

        uxB = tabs["u"][..., 0] * tabs["B"][..., 1] - tabs["u"][..., 1] * tabs["B"][..., 0]
        for i, tab in enumerate(ind_tabs):
            dt_term = cellint(np.einsum("kqd,kqd->kq", tabs["B"], tab["val"])) * dchi
            curl_term = cellint(tabs["omega"][:, None] * tab["curl"]) * chi_int
            trans = cellint(uxB * tab["curl"]) * chi_int
            e3[i] += dt_term - params.alpha * curl_term + trans

        for i, t in enumerate(pot_tabs):
            e4[i] = max(e4[i], abs(np.einsum("k,q,kqd,kqd->", vol, w, tabs["B"], t["grad"])))

    # initial-data terms close the time telescopes
    tab0 = _state_tables(states[0], params)
    rho0 = tab0["rho"][:, None]
    for i, tab in enumerate(sc_tabs):
        e1[i] = abs(e1[i] + cellint(rho0 * tab["val"]))
    mom0 = tab0["rho"][:, None, None] * tab0["uhat"][:, None, :]
    for i, tab in enumerate(mom_tabs):
        e2[i] = abs(e2[i] + cellint(np.einsum("kqd,kqd->kq", mom0, tab["val"])))
    for i, tab in enumerate(ind_tabs):
        e3[i] = abs(e3[i] + cellint(np.einsum("kqd,kqd->kq", tab0["B"], tab["val"])))

    lv = LevelResiduals(h=mesh.h, n=mesh.n, e1=e1, e2=e2, e3=e3, e4=e4)
    return ConsistencyReport(levels=[lv])


def merge_reports(reports: list) -> ConsistencyReport:
    levels = [lv for r in reports for lv in r.levels]
    levels.sort(key=lambda lv: -lv.h)
    rep = ConsistencyReport(levels=levels)
    if len(levels) >= 3:
        rep.fit()
    return rep


def eoc(errors, hs):
    """Least-squares slope of log(error) vs log(h); 'exact' if any error
    is zero or negative (nothing left to fit)."""
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    if len(errors) < 2 or len(errors) != len(hs):
        raise ValueError(f"need >= 2 matching levels, got {len(errors)} errors, {len(hs)} hs")
    if np.any(errors <= 0.0):
        return "exact"
    A = np.column_stack([np.log(hs), np.ones(len(hs))])
    slope, _ = np.linalg.lstsq(A, np.log(errors), rcond=None)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_energy_csv(path, reports: list, first: EnergyReport | None = None):
    """Time series, one row per step (plus the t=0 row when given)."""
    cols = ["t", "kinetic", "internal", "magnetic", "viscous", "resistive",
            "D1", "D2", "D3", "D4", "D5", "residual", "mass", "min_density",
            "divfree_residual"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for rep, div in reports:
            wr.writerow([_fmt(v) for v in (
                rep.t, rep.kinetic, rep.internal, rep.magnetic,
                rep.viscous, rep.resistive, rep.D1, rep.D2, rep.D3,
                rep.D4, rep.D5, rep.identity_residual, rep.mass,
                rep.min_density, div)])


def write_eoc_csv(path, report: ConsistencyReport):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["h", "e1", "e2", "e3", "e4", "eoc1", "eoc2", "eoc3", "eoc4"])
        fits = report.eoc or {}
        fitrow = [fits.get(k, "") for k in ("e1", "e2", "e3", "e4")]
        for lv in report.levels:
            m = lv.maxima()
            wr.writerow([_fmt(lv.h), *[_fmt(v) for v in m],
                         *[_fmt(f) if f != "" else "" for f in fitrow]])


def write_fields_csv(path, state: DiscreteState):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["field", "dof", "x", "y", "v0", "v1"])
        for name, fld in (("rho", state.rho), ("u", state.u), ("B", state.B)):
            for row in field_rows(fld, name):
                row = row + [""] * (6 - len(row))
                wr.writerow([_fmt(v) if v != "" else "" for v in row])
