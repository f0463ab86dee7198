"""Model parameters, constitutive laws and numerical fluxes.

Conventions for the planar problem: the curl of a vector field is the
scalar ``d1 B2 - d2 B1``, the curl of a scalar ``w`` is the vector
``(d2 w, -d1 w)``, and the magnetic force density is
``curl(B) x B' = w (-B2', B1')`` with ``w = curl B``.  The scalar cross
product of two vectors is ``u x B = u1 B2 - u2 B1``, so that
``(curl B x B') . u = -(curl B) (u x B')`` pointwise, the cancellation that
moves magnetic energy between the momentum and induction equations without
loss.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Params:
    """Physical and discretization parameters.

    mu, lam: shear / bulk viscosity coefficients (mu > 0, mu + lam >= 0);
    alpha: magnetic resistivity; a, gamma: isentropic pressure law
    p = a rho^gamma with a > 0, gamma > 1; eps: exponent of the h^eps
    artificial density diffusion in the upwind flux; dt, T: time step and
    final time; d: spatial dimension (fixed to 2 for the time steppers).
    """
    mu: float = 0.1
    lam: float = 0.0
    alpha: float = 0.1
    a: float = 1.0
    gamma: float = 2.0
    eps: float = 1.0
    dt: float = 0.0125
    T: float = 0.1
    d: int = 2

    def __post_init__(self):
        if self.mu <= 0 or self.mu + self.lam < 0:
            raise ValueError(f"need mu > 0 and mu + lam >= 0, got mu={self.mu}, lam={self.lam}")
        if self.alpha <= 0:
            raise ValueError(f"need alpha > 0, got {self.alpha}")
        if self.a <= 0 or self.gamma <= 1:
            raise ValueError(f"pressure law needs a > 0 and gamma > 1, got a={self.a}, gamma={self.gamma}")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError(f"need dt > 0 and T > 0, got dt={self.dt}, T={self.T}")

    @property
    def nu(self) -> float:
        """Coefficient of the divergence term in the broken stress form:
        nu = (d-2)/d * mu + lam (so nu = lam in 2D)."""
        return (self.d - 2) / self.d * self.mu + self.lam


def pressure(rho, a: float, gamma: float):
    """Isentropic pressure p = a rho^gamma."""
    return a * np.power(rho, gamma)


def pressure_potential(rho, a: float, gamma: float):
    """Pressure potential H(rho) = a/(gamma-1) rho^gamma.

    Satisfies rho H'(rho) - H(rho) = p(rho), the identity that converts the
    renormalized continuity update into the internal energy balance.
    """
    return a / (gamma - 1.0) * np.power(rho, gamma)


def stress(G: np.ndarray, params: Params) -> np.ndarray:
    """Full viscous stress S = mu (G + G^T - (2/d) tr(G) I) + lam tr(G) I.

    ``G`` holds velocity gradients, shape (..., d, d).  Used by the
    consistency diagnostics; the schemes themselves apply the equivalent
    reduced broken form mu grad:grad + nu div*div.
    """
    d = G.shape[-1]
    tr = np.trace(G, axis1=-2, axis2=-1)
    eye = np.eye(d)
    dev = G + np.swapaxes(G, -2, -1) - (2.0 / d) * tr[..., None, None] * eye
    return params.mu * dev + params.lam * tr[..., None, None] * eye


def pos_part(x):
    """Branch-free positive part (x + |x|)/2."""
    return 0.5 * (x + np.abs(x))


def neg_part(x):
    """Branch-free negative part (x - |x|)/2 (nonpositive)."""
    return 0.5 * (x - np.abs(x))


def upwind(r_in, r_out, vn):
    """Upwind transport flux Up[r, u] = r_in [vn]^+ + r_out [vn]^-.

    ``vn`` is the normal velocity along the stored face normal (in -> out),
    so positive vn transports the value from the `in` side.
    """
    return r_in * pos_part(vn) + r_out * neg_part(vn)


def diffusive_flux(r_in, r_out, vn, h: float, eps: float):
    """Stabilized flux F = Up[r, u] - h^eps (r_out - r_in).

    The h^eps jump term adds artificial density diffusion; together with
    the upwinding it produces the face dissipation terms of the energy
    balance.  Works componentwise when r carries extra axes (momentum).
    """
    up = upwind(r_in, r_out, vn)
    return up - h ** eps * (r_out - r_in)


def epsilon_window(gamma: float, d: int, variant: str) -> tuple[float, float] | None:
    """Admissible open interval for eps at this gamma, or None if gamma is
    itself out of range.  Upper bound np.inf for gamma >= 2."""
    if gamma >= 2.0:
        return (0.0, np.inf)
    if variant == "scheme1":
        gmin = 4.0 * d / (1.0 + 3.0 * d)
    else:
        gmin = 1.0
    if gamma <= gmin:
        return None
    return (0.0, 2.0 * gamma - 1.0 - d / 3.0)


def validate_epsilon(gamma: float, d: int, eps: float, variant: str) -> None:
    """Raise ValueError unless (gamma, eps) sits in the stability window.

    For gamma >= 2 any eps > 0 is fine.  Below, the Dirichlet variant needs
    gamma > 4d/(1+3d) and the periodic one gamma > 1, with
    eps in (0, 2*gamma - 1 - d/3).
    """
    if variant not in ("scheme1", "scheme2"):
        raise ValueError(f"unknown variant {variant!r}")
    win = epsilon_window(gamma, d, variant)
    if win is None:
        gmin = 4.0 * d / (1.0 + 3.0 * d) if variant == "scheme1" else 1.0
        raise ValueError(
            f"gamma={gamma} not admissible for {variant} in d={d}: need gamma > {gmin:.6g}")
    lo, hi = win
    if not (lo < eps < hi):
        hi_txt = "inf" if np.isinf(hi) else f"{hi:.6g}"
        raise ValueError(
            f"epsilon={eps} outside the admissible interval ({lo:.6g}, {hi_txt}) "
            f"for {variant} with gamma={gamma}, d={d}")


def lorentz(curlB: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Magnetic force density curl(B_new) x B_old = w (-B2, B1).

    ``curlB`` is the scalar curl (any shape), ``B`` the vector field with a
    trailing component axis; broadcasts pointwise.
    """
    out = np.empty(np.broadcast(curlB[..., None], B).shape)
    out[..., 0] = -curlB * B[..., 1]
    out[..., 1] = curlB * B[..., 0]
    return out


def cross2(u: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Scalar planar cross product u x B = u1 B2 - u2 B1."""
    return u[..., 0] * B[..., 1] - u[..., 1] * B[..., 0]
