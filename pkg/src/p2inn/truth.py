"""Ground truth: Strang-split spectral solver for CDR, closed form for Helmholtz,
and sampling of training / test point sets."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SolverStateError
from .pdes import CDR, HELMHOLTZ, T_MAX, X_MAX, PdeInstance, eval_ic

DEFAULT_NX = 256
DEFAULT_NT = 100


@dataclass(frozen=True)
class SolutionGrid:
    """u on x_j = 2 pi j / nx (j < nx) and t_n = n T / nt (n <= nt).

    ``values`` has shape (nt + 1, nx): row n is the time slice t_n.
    """

    instance: PdeInstance
    nx: int
    nt: int
    values: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return X_MAX * np.arange(self.nx) / self.nx

    @property
    def t(self) -> np.ndarray:
        return T_MAX * np.arange(self.nt + 1) / self.nt

    def interpolate(self, points) -> np.ndarray:
        """Bilinear interpolation, periodic in x."""
        pts = np.asarray(points, dtype=np.float64)
        fx = np.mod(pts[:, 0], X_MAX) / X_MAX * self.nx
        ft = np.clip(pts[:, 1] / T_MAX * self.nt, 0.0, self.nt)
        j0 = np.floor(fx).astype(int) % self.nx
        n0 = np.minimum(np.floor(ft).astype(int), self.nt - 1)
        wx = fx - np.floor(fx)
        wt = ft - n0
        j1 = (j0 + 1) % self.nx
        v = self.values
        lo = (1 - wx) * v[n0, j0] + wx * v[n0, j1]
        hi = (1 - wx) * v[n0 + 1, j0] + wx * v[n0 + 1, j1]
        return (1 - wt) * lo + wt * hi


def reaction_step(u, rho: float, dt: float):
    """Exact flow of du/dt = rho u (1 - u) over ``dt``.

    The closed form is valid for every u >= 0 (its denominator stays
    positive), which also covers the 1 + sin(x) initial condition.
    """
    u = np.asarray(u, dtype=np.float64)
    if rho == 0.0:
        return u.copy()
    if not np.all(np.isfinite(u)):
        raise SolverStateError("non-finite state entering the reaction step")
    if np.any(u < -1e-9):
        raise SolverStateError(f"reaction step needs u >= 0, got min {u.min():.3e}")
    u = np.maximum(u, 0.0)
    if dt == 0.0:
        return u
    g = math.exp(rho * dt)
    return u * g / (u * g + 1.0 - u)


def _check_nx(nx: int):
    if nx < 2 or nx & (nx - 1):
        raise ConfigurationError(f"grid size must be a power of two, got {nx}")


def convdiff_multiplier(nx: int, beta: float, nu: float, dt: float) -> np.ndarray:
    """Fourier multiplier exp((-i beta k - nu k^2) dt) for the non-negative modes k = 0..nx/2."""
    _check_nx(nx)
    k = np.arange(nx // 2 + 1, dtype=np.float64)
    return np.exp((-1j * beta * k - nu * k * k) * dt)


def convdiff_step(u_grid, beta: float, nu: float, dt: float, multiplier=None) -> np.ndarray:
    """Exact spectral flow of u_t + beta u_x - nu u_xx = 0 on the periodic grid."""
    u = np.asarray(u_grid, dtype=np.float64)
    nx = u.shape[-1]
    _check_nx(nx)
    if beta == 0.0 and nu == 0.0:
        return u.copy()
    if multiplier is None:
        multiplier = convdiff_multiplier(nx, beta, nu, dt)
    return np.fft.irfft(np.fft.rfft(u) * multiplier, n=nx)


def solve_cdr(instance: PdeInstance, nx: int = DEFAULT_NX, nt: int = DEFAULT_NT) -> SolutionGrid:
    """Strang splitting: half reaction step, full convection-diffusion step, half reaction step."""
    if instance.family != CDR:
        raise ConfigurationError("solve_cdr needs a CDR instance")
    _check_nx(nx)
    if nt < 1:
        raise ConfigurationError("nt must be positive")
    beta, nu, rho = instance.mu
    dt = T_MAX / nt
    x = X_MAX * np.arange(nx) / nx
    out = np.empty((nt + 1, nx))
    u = eval_ic(instance.ic, x)
    out[0] = u
    mult = convdiff_multiplier(nx, beta, nu, dt)
    for n in range(nt):
        u = reaction_step(u, rho, dt / 2)
        u = convdiff_step(u, beta, nu, dt, mult)
        u = reaction_step(u, rho, dt / 2)
        out[n + 1] = u
    if not np.all(np.isfinite(out)):
        raise SolverStateError(f"solver produced non-finite values for {instance}")
    return SolutionGrid(instance, nx, nt, out)


def helmholtz_exact(a, points) -> np.ndarray:
    """u(x, y) = sin(a pi x) sin(a pi y)  (k = 1)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ap = np.asarray(a, dtype=np.float64) * math.pi
    return np.sin(ap * pts[:, 0]) * np.sin(ap * pts[:, 1])


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSizes:
    collocation: int
    initial: int
    boundary: int
    test: int

    @classmethod
    def default(cls, family: str) -> "DatasetSizes":
        if family == CDR:
            return cls(1000, 256, 100, 1000)
        return cls(1000, 0, 400, 100)


@dataclass
class Dataset:
    """Point sets for one PDE instance.

    CDR: ``boundary`` holds the (0, t) points; their periodic partners are
    ``boundary_pair`` at (2 pi, t) and ``boundary_values`` is empty.
    Helmholtz: ``boundary`` holds edge points with exact ``boundary_values``;
    there are no initial points.
    """

    instance: PdeInstance
    collocation: np.ndarray
    initial: np.ndarray
    initial_values: np.ndarray
    boundary: np.ndarray
    boundary_pair: np.ndarray
    boundary_values: np.ndarray
    test: np.ndarray
    test_values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple:
        if self.instance.family == CDR:
            return (len(self.collocation), len(self.initial), len(self.boundary), len(self.test))
        return (len(self.collocation), len(self.boundary), len(self.test))


def _rng_for(instance: PdeInstance, seed: int) -> np.random.Generator:
    tag = zlib.crc32(f"{instance.family}|{instance.mu}|{instance.ic}".encode())
    return np.random.default_rng([int(seed), tag])


def sample_dataset(instance: PdeInstance, grid: SolutionGrid | None = None, seed: int = 0,
                   sizes: DatasetSizes | None = None) -> Dataset:
    """Draw collocation / initial / boundary / test points; deterministic per (instance, seed)."""
    sizes = sizes or DatasetSizes.default(instance.family)
    rng = _rng_for(instance, seed)
    if instance.family == CDR:
        if grid is None:
            grid = solve_cdr(instance)
        colloc = np.column_stack([rng.uniform(0, X_MAX, sizes.collocation), rng.uniform(0, T_MAX, sizes.collocation)])
        xs = grid.x
        if sizes.initial < len(xs):
            xs = np.sort(rng.choice(xs, size=sizes.initial, replace=False))
        elif sizes.initial > len(xs):
            raise ConfigurationError(f"{sizes.initial} initial points requested from a {len(xs)}-point grid")
        initial = np.column_stack([xs, np.zeros_like(xs)])
        init_vals = eval_ic(instance.ic, xs)
        tb = rng.uniform(0, T_MAX, sizes.boundary)
        bnd = np.column_stack([np.zeros_like(tb), tb])
        pair = np.column_stack([np.full_like(tb, X_MAX), tb])
        test = np.column_stack([rng.uniform(0, X_MAX, sizes.test), rng.uniform(0, T_MAX, sizes.test)])
        return Dataset(instance, colloc, initial, init_vals, bnd, pair, np.empty(0), test,
                       grid.interpolate(test), meta={"nx": grid.nx, "nt": grid.nt, "seed": seed})
    if instance.family != HELMHOLTZ:
        raise ConfigurationError(f"unknown family {instance.family!r}")
    a = instance.a
    colloc = rng.uniform(-1, 1, (sizes.collocation, 2))
    edges = rng.integers(0, 4, sizes.boundary)
    s = rng.uniform(-1, 1, sizes.boundary)
    bx = np.where(edges == 0, -1.0, np.where(edges == 1, 1.0, s))
    by = np.where(edges == 2, -1.0, np.where(edges == 3, 1.0, s))
    bnd = np.column_stack([bx, by])
    test = rng.uniform(-1, 1, (sizes.test, 2))
    empty2 = np.empty((0, 2))
    return Dataset(instance, colloc, empty2, np.empty(0), bnd, empty2, helmholtz_exact(a, bnd), test,
                   helmholtz_exact(a, test), meta={"seed": seed})


def exact_solution(instance: PdeInstance, points, grid: SolutionGrid | None = None) -> np.ndarray:
    """Ground truth at arbitrary points (bilinear on the solver grid for CDR)."""
    if instance.family == HELMHOLTZ:
        return helmholtz_exact(instance.a, points)
    grid = grid or solve_cdr(instance)
    return grid.interpolate(points)


# ---------------------------------------------------------------------------
# dataset export
#
#   # p2inn-dataset 1
#   # instance {"family": ..., "mu": [...], "ic": ..., "pde_type": ...}
#   [collocation] x,t            (Helmholtz: x,y)
#   [initial] x,t,u              (CDR only)
#   [boundary] x,t               (CDR: N rows at x = 0 then N matching rows at x = 2 pi)
#   [boundary] x,y,u             (Helmholtz)
#   [test] x,t,u                 (Helmholtz: x,y,u)


def _block(name, cols, arr):
    lines = [f"[{name}] {','.join(cols)}"]
    lines += [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(arr)] if len(arr) else []
    return lines


def export_dataset(ds: Dataset, path) -> None:
    inst = ds.instance
    head = {"family": inst.family, "mu": list(inst.mu), "ic": inst.ic, "pde_type": inst.pde_type}
    lines = ["# p2inn-dataset 1", "# instance " + json.dumps(head, sort_keys=True)]
    if inst.family == CDR:
        lines += _block("collocation", ("x", "t"), ds.collocation)
        lines += _block("initial", ("x", "t", "u"), np.column_stack([ds.initial, ds.initial_values]))
        lines += _block("boundary", ("x", "t"), np.vstack([ds.boundary, ds.boundary_pair]))
        lines += _block("test", ("x", "t", "u"), np.column_stack([ds.test, ds.test_values]))
    else:
        lines += _block("collocation", ("x", "y"), ds.collocation)
        lines += _block("boundary", ("x", "y", "u"), np.column_stack([ds.boundary, ds.boundary_values]))
        lines += _block("test", ("x", "y", "u"), np.column_stack([ds.test, ds.test_values]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# p2inn-dataset"):
        raise ConfigurationError(f"{path}: not a dataset file")
    head = json.loads(lines[1].split(" ", 2)[2])
    inst = PdeInstance(head["family"], tuple(head["mu"]), head.get("ic"), head.get("pde_type"))
    blocks, cur = {}, None
    for ln in lines[2:]:
        if ln.startswith("["):
            cur = ln[1:ln.index("]")]
            blocks[cur] = []
        elif ln.strip():
            blocks[cur].append([float(v) for v in ln.split(",")])
    arr = {k: np.array(v).reshape(len(v), -1) if v else np.empty((0, 3)) for k, v in blocks.items()}
    if inst.family == CDR:
        b = arr["boundary"]
        half = len(b) // 2
        return Dataset(inst, arr["collocation"], arr["initial"][:, :2], arr["initial"][:, 2], b[:half], b[half:],
                       np.empty(0), arr["test"][:, :2], arr["test"][:, 2])
    return Dataset(inst, arr["collocation"], np.empty((0, 2)), np.empty(0), arr["boundary"][:, :2], np.empty((0, 2)),
                   arr["boundary"][:, 2], arr["test"][:, :2], arr["test"][:, 2])
