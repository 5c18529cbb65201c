"""PDE families: convection-diffusion-reaction (CDR) in 1D and Helmholtz in 2D.

CDR:        u_t + beta u_x - nu u_xx - rho u (1 - u) = 0   on [0, 2pi) x [0, 1], periodic in x
Helmholtz:  u_xx + u_yy + k^2 u - q(x, y) = 0              on [-1, 1]^2, k = 1, a1 = a2 = a
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import jetad
from .errors import ConfigurationError
from .jetad import Jet

CDR = "cdr"
HELMHOLTZ = "helmholtz"
FAMILIES = (CDR, HELMHOLTZ)

X_MAX = 2.0 * math.pi
T_MAX = 1.0
HELMHOLTZ_K = 1.0

# input column layout
X, T, Y = 0, 1, 1

IC_KINDS = ("gauss_pi_2", "gauss_pi_4", "one_plus_sin")

# which of (beta, nu, rho) are active for each CDR equation type
PDE_TYPES = {
    "convection": (True, False, False),
    "diffusion": (False, True, False),
    "reaction": (False, False, True),
    "conv_diff": (True, True, False),
    "reac_diff": (False, True, True),
    "conv_diff_reac": (True, True, True),
    "helmholtz": None,
}
COEFF_NAMES = ("beta", "nu", "rho")


@dataclass(frozen=True)
class InitialCondition:
    kind: str

    def __post_init__(self):
        if self.kind not in IC_KINDS:
            raise ConfigurationError(f"unknown initial condition {self.kind!r}; expected one of {IC_KINDS}")

    def __call__(self, x):
        return eval_ic(self.kind, x)


def eval_ic(kind, x):
    """u(x, 0).  The Gaussians are unnormalised bumps peaking at 1 at x = pi."""
    if isinstance(kind, InitialCondition):
        kind = kind.kind
    x = np.asarray(x, dtype=np.float64)
    if kind == "gauss_pi_2":
        s = math.pi / 2
        return np.exp(-((x - math.pi) ** 2) / (2 * s * s))
    if kind == "gauss_pi_4":
        s = math.pi / 4
        return np.exp(-((x - math.pi) ** 2) / (2 * s * s))
    if kind == "one_plus_sin":
        return 1.0 + np.sin(x)
    raise ConfigurationError(f"unknown initial condition {kind!r}")


@dataclass(frozen=True)
class PdeInstance:
    """One member of a PDE family.

    ``mu`` is (beta, nu, rho) for CDR and (a,) for Helmholtz; k is fixed to 1.
    """

    family: str
    mu: tuple
    ic: str | None = None
    pde_type: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown PDE family {self.family!r}; expected one of {FAMILIES}")
        mu = tuple(float(v) for v in self.mu)
        object.__setattr__(self, "mu", mu)
        if self.family == CDR:
            if len(mu) != 3:
                raise ConfigurationError("CDR instances need mu = (beta, nu, rho)")
            if any(v < 0 for v in mu):
                raise ConfigurationError(f"CDR coefficients must be non-negative, got {mu}")
            InitialCondition(self.ic or "")
        else:
            if len(mu) != 1:
                raise ConfigurationError("Helmholtz instances need mu = (a,)")

    @property
    def mu_vector(self) -> np.ndarray:
        return np.array(self.mu)

    @property
    def param_dim(self) -> int:
        return len(self.mu)

    @property
    def beta(self):
        return self.mu[0]

    @property
    def nu(self):
        return self.mu[1]

    @property
    def rho(self):
        return self.mu[2]

    @property
    def a(self):
        return self.mu[0]

    @property
    def domain(self):
        if self.family == CDR:
            return ((0.0, X_MAX), (0.0, T_MAX))
        return ((-1.0, 1.0), (-1.0, 1.0))

    @property
    def key(self) -> str:
        """Short stable identifier, e.g. ``rho=5`` or ``beta=1,nu=2,rho=3`` or ``a=2.75``."""
        if self.family == HELMHOLTZ:
            return f"a={_num(self.a)}"
        active = PDE_TYPES.get(self.pde_type) if self.pde_type else None
        if active is None:
            active = tuple(v != 0 for v in self.mu)
        parts = [f"{n}={_num(v)}" for n, v, on in zip(COEFF_NAMES, self.mu, active) if on]
        return ",".join(parts) or "beta=0,nu=0,rho=0"


def _num(v: float) -> str:
    return f"{v:g}"


def _coeff(mu, j, n):
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim == 1:
        return mu[j]
    if mu.shape[0] != n:
        raise ConfigurationError(f"per-point coefficients have {mu.shape[0]} rows for {n} points")
    return mu[:, j:j + 1]


def residual_cdr(u: Jet, mu) -> Jet:
    """u_t + beta u_x - nu u_xx - rho u (1 - u), per point, as a value-only jet.

    ``u`` must carry first partials along t and x and the second partial along
    x (input columns 1 and 0).  ``mu`` is (beta, nu, rho) or an (N, 3) table.
    """
    if T not in u.first or X not in u.first:
        raise ConfigurationError("CDR residual needs u_t and u_x")
    xpos = u.first.index(X)
    if xpos not in u.second:
        raise ConfigurationError("CDR residual needs u_xx")
    n = u.npoints
    beta, nu, rho = (_coeff(mu, j, n) for j in range(3))
    val = jetad.component(u, "value")
    u_t = jetad.component(u, "d1", u.first.index(T))
    u_x = jetad.component(u, "d1", xpos)
    u_xx = jetad.component(u, "d2", u.second.index(xpos))
    one_minus = jetad.jet_add_const(jetad.jet_scale(val, -1.0), 1.0)
    reaction = jetad.jet_mul(val, one_minus)
    r = jetad.jet_add(u_t, jetad.jet_scale(u_x, beta))
    r = jetad.jet_sub(r, jetad.jet_scale(u_xx, nu))
    return jetad.jet_sub(r, jetad.jet_scale(reaction, rho))


def helmholtz_source(a, points, k: float = HELMHOLTZ_K) -> np.ndarray:
    """q(x, y) = (-(a pi)^2 - (a pi)^2 + k^2) sin(a pi x) sin(a pi y), shape (N,)."""
    pts = np.asarray(points, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    ap = a * math.pi
    return (-2.0 * ap**2 + k * k) * np.sin(ap * pts[:, 0]) * np.sin(ap * pts[:, 1])


def residual_helmholtz(u: Jet, mu, points) -> Jet:
    """u_xx + u_yy + k^2 u - q(x, y) with k = 1 and a1 = a2 = a.

    ``mu`` is (a,) or an (N, 1) table of per-point values.
    """
    if X not in u.first or Y not in u.first:
        raise ConfigurationError("Helmholtz residual needs partials along x and y")
    px, py = u.first.index(X), u.first.index(Y)
    if px not in u.second or py not in u.second:
        raise ConfigurationError("Helmholtz residual needs u_xx and u_yy")
    mu = np.asarray(mu, dtype=np.float64)
    a = mu[0] if mu.ndim == 1 else mu[:, 0]
    q = helmholtz_source(a, points)[:, None]
    u_xx = jetad.component(u, "d2", u.second.index(px))
    u_yy = jetad.component(u, "d2", u.second.index(py))
    val = jetad.component(u, "value")
    r = jetad.jet_add(u_xx, u_yy)
    r = jetad.jet_add(r, jetad.jet_scale(val, HELMHOLTZ_K**2))
    return jetad.jet_add_const(r, -q)


def coefficient_grid(lo: float, hi: float, step: float) -> list[float]:
    if step <= 0:
        raise ConfigurationError(f"grid step must be positive, got {step}")
    if hi < lo:
        raise ConfigurationError(f"empty coefficient range [{lo}, {hi}]")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def enumerate_instances(pde_type: str, lo: float, hi: float, step: float = 1.0, ic: str = "gauss_pi_2") -> list[PdeInstance]:
    """Cartesian product of the active coefficients over ``lo..hi``; inactive ones pinned to 0."""
    if pde_type not in PDE_TYPES:
        raise ConfigurationError(f"unknown PDE type {pde_type!r}; expected one of {tuple(PDE_TYPES)}")
    values = coefficient_grid(lo, hi, step)
    if pde_type == "helmholtz":
        return [PdeInstance(HELMHOLTZ, (a,), pde_type="helmholtz") for a in values]
    active = PDE_TYPES[pde_type]
    axes = [values if on else [0.0] for on in active]
    return [PdeInstance(CDR, mu, ic=ic, pde_type=pde_type) for mu in itertools.product(*axes)]


def make_instance(pde_type: str, coeffs, ic: str = "gauss_pi_2") -> PdeInstance:
    """Instance from the active coefficients only, e.g. ``make_instance('reaction', [5])``."""
    if pde_type not in PDE_TYPES:
        raise ConfigurationError(f"unknown PDE type {pde_type!r}")
    coeffs = [float(c) for c in np.atleast_1d(coeffs)]
    if pde_type == "helmholtz":
        if len(coeffs) != 1:
            raise ConfigurationError("Helmholtz takes one coefficient a")
        return PdeInstance(HELMHOLTZ, tuple(coeffs), pde_type=pde_type)
    active = PDE_TYPES[pde_type]
    if len(coeffs) != sum(active):
        raise ConfigurationError(f"{pde_type} takes {sum(active)} coefficients, got {len(coeffs)}")
    it = iter(coeffs)
    mu = tuple(next(it) if on else 0.0 for on in active)
    return PdeInstance(CDR, mu, ic=ic, pde_type=pde_type)
