"""SVD modulation of the P2INN manifold network.

Each interior manifold layer W (shape fan_out x fan_in) is written as
Psi diag(alpha) Phi^T.  During modulated fine-tuning only the alpha vectors
are trainable; the bases, the first and last manifold layers, the encoders
and every bias stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import jetad, nets
from .errors import CheckpointLengthError, CheckpointParseError, ConfigurationError, NumericError
from .jetad import Jet, Tape
from .nets import NetworkWeights, Params

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60
SECTION_ALPHA = "svd_alpha"
SECTION_PSI = "svd_psi"
SECTION_PHI = "svd_phi"


def _round_robin(n: int):
    """Pairings for one sweep: n-1 rounds of disjoint (i, j) pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_svd(A, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS):
    """Thin SVD A = U diag(s) V^T by one-sided (Hestenes) Jacobi rotations.

    Columns of a working copy are orthogonalized pairwise until every
    normalized inner product |<a_i, a_j>| / (|a_i| |a_j|) is below ``tol``.
    Returns (U, s, V) with s descending and the first nonzero entry of each
    column of V positive.  Shapes: U (m, r), s (r,), V (n, r), r = min(m, n).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ConfigurationError(f"jacobi_svd needs a non-empty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericError("jacobi_svd: matrix has non-finite entries")
    m, n = A.shape
    if m < n:
        U, s, V = _jacobi_tall(A.T, tol, max_sweeps)
        U, V = V, U
        return _canonical(U, s, V)
    return _canonical(*_jacobi_tall(A, tol, max_sweeps))


def _jacobi_tall(A, tol, max_sweeps):
    m, n = A.shape
    G = A.copy()
    V = np.eye(n)
    rounds = _round_robin(n)
    off = np.inf
    for sweep in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            gp, gq = G[:, p], G[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = G[:, p], G[:, q]
            G[:, p], G[:, q] = c * gp - s * gq, s * gp + c * gq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if off <= tol:
            break
    else:
        raise NumericError(f"jacobi_svd: no convergence after {max_sweeps} sweeps (off-diagonal {off:.3e}, tol {tol:.1e})")
    sv = np.linalg.norm(G, axis=0)
    U = np.zeros_like(G)
    nz = sv > 0
    U[:, nz] = G[:, nz] / sv[nz]
    if not nz.all():
        U = _complete_basis(U, nz)
    return U, sv, V


def _complete_basis(U, nz):
    """Fill columns of U belonging to zero singular values with an orthonormal complement."""
    m, r = U.shape
    basis = [U[:, i] for i in range(r) if nz[i]]
    fill = []
    for e in np.eye(m):
        v = e - sum(np.dot(b, e) * b for b in basis + fill) if basis or fill else e.copy()
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            fill.append(v / nv)
        if len(fill) == int((~nz).sum()):
            break
    out = U.copy()
    for i, v in zip(np.flatnonzero(~nz), fill):
        out[:, i] = v
    return out


def _canonical(U, s, V):
    order = np.argsort(-s, kind="stable")
    U, s, V = U[:, order], s[order], V[:, order]
    for j in range(V.shape[1]):
        nz = np.flatnonzero(np.abs(V[:, j]) > 1e-14)
        if len(nz) and V[nz[0], j] < 0:
            V[:, j] *= -1
            U[:, j] *= -1
    return U, s, V


# ---------------------------------------------------------------------------
# factors


def modulated_layer_names(spec) -> list[str]:
    """Interior manifold layers g1 .. g_{D_g-2} (the first and last stay plain)."""
    if spec.variant != "P2INN":
        raise ConfigurationError(f"SVD modulation needs a P2INN spec, got {spec.variant}")
    if spec.depth_g < 3:
        raise ConfigurationError("SVD modulation needs a manifold network of depth >= 3")
    return [f"g{i}" for i in range(1, spec.depth_g - 1)]


@dataclass
class SvdFactors:
    """Frozen network plus per-layer bases and one flat trainable ``alpha`` store."""

    base: NetworkWeights
    names: list[str]
    psi: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    alpha: np.ndarray
    offsets: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.offsets:
            pos = 0
            for n in self.names:
                r = self.psi[n].shape[1]
                self.offsets[n] = (pos, r)
                pos += r
        need = sum(r for _, r in self.offsets.values())
        if self.alpha.shape != (need,):
            raise ConfigurationError(f"alpha store has shape {self.alpha.shape}, factors need ({need},)")

    @property
    def trainable(self) -> int:
        return self.alpha.size

    def alpha_of(self, name: str) -> np.ndarray:
        start, r = self.offsets[name]
        return self.alpha[start:start + r]

    def matrix(self, name: str) -> np.ndarray:
        return (self.psi[name] * self.alpha_of(name)) @ self.phi[name].T

    def fold(self) -> NetworkWeights:
        """Plain weights with each modulated layer replaced by Psi diag(alpha) Phi^T."""
        out = self.base.copy()
        for n in self.names:
            out.layer(n)[0][:] = self.matrix(n)
        return out

    def copy(self) -> "SvdFactors":
        return SvdFactors(self.base.copy(), list(self.names), dict(self.psi), dict(self.phi), self.alpha.copy())


def factorize_decoder(weights: NetworkWeights, tol: float = JACOBI_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdFactors:
    names = modulated_layer_names(weights.spec)
    psi, phi, alphas = {}, {}, []
    for n in names:
        W, _ = weights.layer(n)
        try:
            U, s, V = jacobi_svd(W, tol, max_sweeps)
        except NumericError as exc:
            raise NumericError(f"layer {n} ({W.shape[0]}x{W.shape[1]}): {exc}") from None
        psi[n], phi[n] = U, V
        alphas.append(s)
    return SvdFactors(weights.copy(), names, psi, phi, np.concatenate(alphas))


class ModulatedParams(Params):
    """Serves frozen layers as constants and modulated layers as Psi diag(alpha) Phi^T."""

    def __init__(self, tape: Tape, factors: SvdFactors):
        super().__init__(tape, factors.base, trainable=False)
        self.factors = factors

    def _make(self, name):
        f = self.factors
        if name not in f.offsets:
            return super()._make(name)
        start, r = f.offsets[name]
        alpha = self.tape.param(f.alpha, start, (r,))
        W = jetad.modulated_matrix(self.tape, alpha, self.tape.const(f.psi[name]), self.tape.const(f.phi[name]))
        _, b = f.base.layer(name)
        return W, self.tape.const(b)


def forward_modulated(factors: SvdFactors, coords: Jet, mu, index=None) -> Jet:
    """P2INN forward with modulated interior manifold layers, on ``coords.tape``."""
    return nets.forward_p2inn(ModulatedParams(coords.tape, factors), coords, mu, index)


def predict_modulated(factors: SvdFactors, points, mu) -> np.ndarray:
    tape = Tape()
    out = forward_modulated(factors, jetad.seed(tape, points), mu)
    return out.value[:, 0].copy()


# ---------------------------------------------------------------------------
# serialization


def save_factors(factors: SvdFactors, path, extra: dict | None = None) -> None:
    sections = {"weights": factors.base.theta, SECTION_ALPHA: factors.alpha}
    sections[SECTION_PSI] = np.concatenate([factors.psi[n].ravel() for n in factors.names])
    sections[SECTION_PHI] = np.concatenate([factors.phi[n].ravel() for n in factors.names])
    meta = dict(extra or {})
    meta["svd_layers"] = factors.names
    nets.write_checkpoint(path, factors.base.spec, sections, meta)


def load_factors(path) -> SvdFactors:
    spec, sections, meta = nets.read_checkpoint(path)
    for tag in ("weights", SECTION_ALPHA, SECTION_PSI, SECTION_PHI):
        if tag not in sections:
            raise CheckpointParseError(f"{path}: missing section {tag}")
    theta = sections["weights"]
    if theta.size != nets.count_params(spec):
        raise CheckpointLengthError(f"{path}: {theta.size} weights stored, spec needs {nets.count_params(spec)}")
    base = NetworkWeights(spec, theta)
    names = modulated_layer_names(spec)
    if meta.get("svd_layers", names) != names:
        raise CheckpointParseError(f"{path}: stored layers {meta.get('svd_layers')} do not match spec {names}")
    psi, phi, ppos, fpos = {}, {}, 0, 0
    for n in names:
        fo, fi = base.layer(n)[0].shape
        r = min(fo, fi)
        if ppos + fo * r > sections[SECTION_PSI].size or fpos + fi * r > sections[SECTION_PHI].size:
            raise CheckpointLengthError(f"{path}: basis sections too short for layer {n}")
        psi[n] = sections[SECTION_PSI][ppos:ppos + fo * r].reshape(fo, r)
        phi[n] = sections[SECTION_PHI][fpos:fpos + fi * r].reshape(fi, r)
        ppos += fo * r
        fpos += fi * r
    try:
        return SvdFactors(base, names, psi, phi, sections[SECTION_ALPHA])
    except ConfigurationError as exc:
        raise CheckpointLengthError(f"{path}: {exc}") from None
