"""Loss assembly, Adam, mini-batch scheduling, seq2seq curriculum and fine-tuning.

Every optimizer step builds a fresh tape: the three loss terms are forward
passes over sampled points, their weighted sum is reverse-differentiated into
the flat parameter vector, and Adam updates that vector in place.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import jetad, nets, pdes
from .errors import ConfigurationError, DivergenceError
from .jetad import Tape
from .nets import NetworkSpec, NetworkWeights, Params
from .pdes import CDR, HELMHOLTZ, X, T, Y
from .truth import Dataset

log = logging.getLogger(__name__)

MODES = ("joint", "per-instance", "seq2seq")
FINETUNE_MODES = ("All", "Shift", "SVD")
HISTORY_COLUMNS = ("step", "L_u", "L_f", "L_b", "total")

# initial/boundary points drawn per step, relative to collocation points
INITIAL_RATIO = 256 / 1000
BOUNDARY_RATIO = 100 / 1000
DEFAULT_INSTANCES_PER_BATCH = 8


@dataclass
class TrainConfig:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    learning_rate: float = 1e-3
    iterations: int = 20000
    batch_size: int | None = None  # collocation points per step; None -> 8 instances' worth
    seed: int = 0
    mode: str = "joint"
    finetune: str | None = None
    finetune_epochs: int = 15
    windows: int = 10
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("w1", "w2", "w3"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigurationError(f"loss weight {name} must be a finite value >= 0, got {v}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 0 or self.finetune_epochs < 0:
            raise ConfigurationError("iteration and epoch budgets must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.finetune is not None and self.finetune not in FINETUNE_MODES:
            raise ConfigurationError(f"unknown fine-tuning mode {self.finetune!r}; expected one of {FINETUNE_MODES}")
        if self.windows < 1:
            raise ConfigurationError("seq2seq needs at least one window")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be >= 1")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.w1, self.w2, self.w3)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class LossBreakdown:
    L_u: float
    L_f: float
    L_b: float
    total: float

    def row(self, step: int) -> tuple:
        return (step, self.L_u, self.L_f, self.L_b, self.total)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    """Points of one optimizer step.  ``*_index`` rows point into ``mu``."""

    family: str
    mu: np.ndarray
    colloc: np.ndarray
    colloc_index: np.ndarray
    initial: np.ndarray
    initial_values: np.ndarray
    initial_index: np.ndarray
    boundary: np.ndarray
    boundary_pair: np.ndarray
    boundary_values: np.ndarray
    boundary_index: np.ndarray


class PointPool:
    """Union of the point sets of several instances of one family."""

    def __init__(self, datasets):
        datasets = list(datasets)
        if not datasets:
            raise ConfigurationError("no datasets to train on")
        fams = {d.instance.family for d in datasets}
        if len(fams) != 1:
            raise ConfigurationError(f"all instances must share a family, got {sorted(fams)}")
        self.family = fams.pop()
        self.datasets = datasets
        self.mu = np.array([d.instance.mu for d in datasets])

        def cat(attr):
            parts = [np.asarray(getattr(d, attr), dtype=np.float64) for d in datasets]
            return np.concatenate(parts) if parts else np.empty(0)

        def idx(attr):
            return np.concatenate([np.full(len(getattr(d, attr)), i, dtype=np.intp) for i, d in enumerate(datasets)])

        self.colloc, self.colloc_index = cat("collocation"), idx("collocation")
        self.initial, self.initial_values, self.initial_index = cat("initial"), cat("initial_values"), idx("initial")
        self.boundary, self.boundary_index = cat("boundary"), idx("boundary")
        self.boundary_pair = cat("boundary_pair")
        self.boundary_values = cat("boundary_values")

    def __len__(self):
        return len(self.colloc)

    def full(self) -> Batch:
        return Batch(self.family, self.mu, self.colloc, self.colloc_index, self.initial, self.initial_values,
                     self.initial_index, self.boundary, self.boundary_pair, self.boundary_values,
                     self.boundary_index)

    def default_batch_size(self) -> int:
        per = len(self.colloc) / len(self.datasets)
        return int(round(per * min(DEFAULT_INSTANCES_PER_BATCH, len(self.datasets))))

    def sample(self, rng: np.random.Generator, batch_size: int | None) -> Batch:
        """Uniform draw over (instance, point) pairs, without replacement within a step."""
        b = batch_size or self.default_batch_size()
        if b >= len(self.colloc):
            return self.full()

        def pick(n_total, n):
            n = max(1, min(n_total, n))
            return rng.choice(n_total, size=n, replace=False)

        c = pick(len(self.colloc), b)
        bi = self._bnd_pick(rng, b, pick)
        ii = pick(len(self.initial), int(round(b * INITIAL_RATIO))) if len(self.initial) else np.empty(0, dtype=np.intp)
        return Batch(
            self.family, self.mu,
            self.colloc[c], self.colloc_index[c],
            self.initial[ii], self.initial_values[ii], self.initial_index[ii],
            self.boundary[bi], self.boundary_pair[bi] if len(self.boundary_pair) else self.boundary_pair,
            self.boundary_values[bi] if len(self.boundary_values) else self.boundary_values,
            self.boundary_index[bi],
        )

    def _bnd_pick(self, rng, b, pick):
        if not len(self.boundary):
            return np.empty(0, dtype=np.intp)
        ratio = BOUNDARY_RATIO
        if self.family == HELMHOLTZ:
            ratio = len(self.boundary) / max(1, len(self.colloc))
        return pick(len(self.boundary), int(round(b * ratio)))


# ---------------------------------------------------------------------------
# loss


def _output(params: Params, points, mu, index, first=(), second=()):
    return nets.network_output(params, points, mu, index, first, second)


def _empty_check(name, arr, weight):
    if weight > 0 and len(arr) == 0:
        raise ConfigurationError(f"loss term {name} has weight {weight} but no points")


def compute_loss(params: Params, batch: Batch, weights=(1.0, 1.0, 1.0)):
    """Build L_u, L_f, L_b on ``params.tape``; returns (LossBreakdown, total node).

    A term whose point set is empty contributes 0 and must carry weight 0,
    except L_u for Helmholtz, which has no initial set by construction.
    """
    w1, w2, w3 = (float(w) for w in weights)
    tape = params.tape
    family = batch.family
    terms = {}

    if family == CDR or len(batch.initial):
        _empty_check("L_u", batch.initial, w1)
    if len(batch.initial):
        u0 = _output(params, batch.initial, batch.mu, batch.initial_index)
        diff = jetad.jet_add_const(u0, -np.asarray(batch.initial_values)[:, None])
        terms["L_u"] = jetad.mean_square(diff)

    _empty_check("L_f", batch.colloc, w2)
    if len(batch.colloc):
        mu_rows = batch.mu[batch.colloc_index]
        if family == CDR:
            u = _output(params, batch.colloc, batch.mu, batch.colloc_index, first=(X, T), second=(X,))
            r = pdes.residual_cdr(u, mu_rows)
        else:
            u = _output(params, batch.colloc, batch.mu, batch.colloc_index, first=(X, Y), second=(X, Y))
            r = pdes.residual_helmholtz(u, mu_rows, batch.colloc)
        terms["L_f"] = jetad.mean_square(r)

    _empty_check("L_b", batch.boundary, w3)
    if len(batch.boundary):
        ub = _output(params, batch.boundary, batch.mu, batch.boundary_index)
        if family == CDR:
            up = _output(params, batch.boundary_pair, batch.mu, batch.boundary_index)
            diff = jetad.jet_sub(ub, up)
        else:
            diff = jetad.jet_add_const(ub, -np.asarray(batch.boundary_values)[:, None])
        terms["L_b"] = jetad.mean_square(diff)

    total = None
    for name, w in zip(("L_u", "L_f", "L_b"), (w1, w2, w3)):
        if name not in terms or w == 0:
            continue
        t = jetad.jet_scale(terms[name], w)
        total = t if total is None else jetad.jet_add(total, t)
    if total is None:
        raise ConfigurationError("all loss weights are zero")
    vals = {k: float(v.value.ravel()[0]) for k, v in terms.items()}
    lb = LossBreakdown(vals.get("L_u", 0.0), vals.get("L_f", 0.0), vals.get("L_b", 0.0), 0.0)
    lb.total = w1 * lb.L_u + w2 * lb.L_f + w3 * lb.L_b
    return lb, total


def loss_and_grad(weights: NetworkWeights, batch: Batch, loss_weights=(1.0, 1.0, 1.0)):
    tape = Tape()
    lb, total = compute_loss(Params(tape, weights), batch, loss_weights)
    return lb, tape.backward(total, weights.theta)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam on a flat parameter vector, updated in place."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        if self.lr == 0:
            return
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _adam(size, cfg: TrainConfig) -> Adam:
    return Adam(size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    weights: NetworkWeights
    history: list[LossBreakdown | tuple] = field(default_factory=list)
    steps: int = 0
    extra: dict = field(default_factory=dict)


def _guard(lb: LossBreakdown, step: int):
    if not all(math.isfinite(v) for v in (lb.L_u, lb.L_f, lb.L_b, lb.total)):
        raise DivergenceError(
            f"non-finite loss at step {step}: L_u={lb.L_u!r} L_f={lb.L_f!r} L_b={lb.L_b!r}", step=step, breakdown=lb)


def _optimize(store: np.ndarray, make_loss, sampler, steps: int, cfg: TrainConfig, history: list, step0: int = 0,
              progress=None):
    """Generic loop: ``make_loss(tape, batch) -> (breakdown, total)``, gradients into ``store``."""
    opt = _adam(store.size, cfg)
    for i in range(steps):
        batch = sampler()
        tape = Tape()
        lb, total = make_loss(tape, batch)
        _guard(lb, step0 + i)
        grad = tape.backward(total, store)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient at step {step0 + i}", step=step0 + i, breakdown=lb)
        opt.step(store, grad)
        if i % cfg.log_every == 0 or i == steps - 1:
            history.append(lb.row(step0 + i))
            if progress is not None:
                progress(step0 + i, lb)
    return history


def _rng(cfg: TrainConfig, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, 0x5EED, salt])


def train_joint(spec: NetworkSpec | NetworkWeights, datasets, cfg: TrainConfig, progress=None) -> TrainResult:
    """Train one model on the union of several instances (P2INN or PINN-P).

    Passing a :class:`NetworkSpec` initializes from ``cfg.seed``; passing
    weights continues from them (a copy is trained).
    """
    weights = nets.init_weights(spec, cfg.seed) if isinstance(spec, NetworkSpec) else spec.copy()
    if not weights.spec.joint and len(list(datasets)) > 1:
        raise ConfigurationError(f"{weights.spec.variant} has no parameter input and cannot be trained jointly")
    pool = PointPool(datasets)
    rng = _rng(cfg)
    history: list = []

    def loss(tape, batch):
        return compute_loss(Params(tape, weights), batch, cfg.weights)

    _optimize(weights.theta, loss, lambda: pool.sample(rng, cfg.batch_size), cfg.iterations, cfg, history,
              progress=progress)
    return TrainResult(weights, history, cfg.iterations)


def train_per_instance(spec: NetworkSpec | NetworkWeights, dataset: Dataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """One model for one instance; used for PINN, PINN-R and LargePINN."""
    return train_joint(spec, [dataset], cfg, progress)


# ---------------------------------------------------------------------------
# seq2seq


@dataclass
class Seq2SeqResult:
    windows: np.ndarray
    snapshots: list[NetworkWeights]
    history: list

    @property
    def weights(self) -> NetworkWeights:
        return self.snapshots[-1]

    def window_of(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        w = np.searchsorted(self.windows, t, side="right") - 1
        return np.clip(w, 0, len(self.snapshots) - 1)

    def predict(self, points, mu=None) -> np.ndarray:
        """Each point is evaluated by the model trained on its own time window."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty(len(pts))
        which = self.window_of(pts[:, T])
        for w in np.unique(which):
            sel = which == w
            out[sel] = nets.predict(self.snapshots[w], pts[sel], mu)
        return out


def window_edges(t_max: float = pdes.T_MAX, windows: int = 10) -> np.ndarray:
    return np.linspace(0.0, t_max, windows + 1)


def _window_dataset(ds: Dataset, t0: float, t1: float, ic_values: np.ndarray) -> Dataset:
    """Collocation and boundary times mapped affinely into [t0, t1]; IC placed at t0."""
    scale = (t1 - t0) / pdes.T_MAX

    def remap(pts):
        pts = pts.copy()
        pts[:, T] = t0 + pts[:, T] * scale
        return pts

    init = ds.initial.copy()
    init[:, T] = t0
    return replace(ds, collocation=remap(ds.collocation), initial=init, initial_values=np.asarray(ic_values),
                   boundary=remap(ds.boundary), boundary_pair=remap(ds.boundary_pair))


def train_seq2seq(spec: NetworkSpec, dataset: Dataset, cfg: TrainConfig, progress=None) -> Seq2SeqResult:
    """Train over consecutive time windows, each warm-started from the previous one.

    The initial condition of window w > 0 is the previous window's prediction
    at the window start on the dataset's initial x-grid.
    """
    if dataset.instance.family != CDR:
        raise ConfigurationError("seq2seq training is defined for the CDR family only")
    edges = window_edges(pdes.T_MAX, cfg.windows)
    per = cfg.iterations // cfg.windows
    weights = nets.init_weights(spec, cfg.seed) if isinstance(spec, NetworkSpec) else spec.copy()
    mu = dataset.instance.mu_vector
    ic = np.asarray(dataset.initial_values, dtype=np.float64)
    snapshots, history = [], []
    for w in range(cfg.windows):
        t0, t1 = edges[w], edges[w + 1]
        if w > 0:
            pts = np.column_stack([dataset.initial[:, X], np.full(len(dataset.initial), t0)])
            ic = nets.predict(snapshots[-1], pts, mu)
        wds = _window_dataset(dataset, t0, t1, ic)
        pool = PointPool([wds])
        rng = _rng(cfg, salt=w + 1)

        def loss(tape, batch):
            return compute_loss(Params(tape, weights), batch, cfg.weights)

        _optimize(weights.theta, loss, lambda: pool.sample(rng, cfg.batch_size), per, cfg, history,
                  step0=w * per, progress=progress)
        snapshots.append(weights.copy())
    return Seq2SeqResult(edges, snapshots, history)


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    weights: NetworkWeights
    mode: str
    trainable: int
    history: list
    state: np.ndarray  # the trained store (theta, shift vectors, or alphas)
    extra: dict = field(default_factory=dict)


def _epoch_steps(n_points: int, batch_size: int | None) -> int:
    if batch_size is None or batch_size >= n_points:
        return 1
    return math.ceil(n_points / batch_size)


def shift_layout(spec: NetworkSpec) -> dict[str, tuple[int, int]]:
    """Offsets of the per-layer shift vectors in one flat store."""
    out, pos = {}, 0
    widths = {n: fo for n, _, fo in nets.layer_widths(spec)}
    for name in nets.hidden_layer_names(spec):
        out[name] = (pos, widths[name])
        pos += widths[name]
    return out


def fold_shifts(weights: NetworkWeights, shifts: np.ndarray) -> NetworkWeights:
    """Return weights whose biases include the learned shifts."""
    out = weights.copy()
    for name, (start, n) in shift_layout(weights.spec).items():
        out.layer(name)[1][:] += shifts[start:start + n]
    return out


class ShiftParams(Params):
    """Frozen weights plus trainable bias shifts held in ``store``."""

    def __init__(self, tape: Tape, weights: NetworkWeights, store: np.ndarray):
        shifts = {name: tape.param(store, start, (n,)) for name, (start, n) in shift_layout(weights.spec).items()}
        super().__init__(tape, weights, trainable=False, shifts=shifts)


def finetune(pretrained: NetworkWeights | str, dataset: Dataset, mode: str, cfg: TrainConfig, progress=None) -> FinetuneResult:
    """Adapt a pretrained model to one instance.

    ``All`` trains every weight, ``Shift`` trains only additive bias shifts on
    the manifold-network hidden layers (zero-initialized), ``SVD`` trains only
    the singular-value diagonals of the interior manifold layers.  An epoch is
    one pass over the instance's full point set; optimizer state starts fresh.
    """
    if isinstance(pretrained, (str, bytes)) or hasattr(pretrained, "__fspath__"):
        pretrained = nets.load_checkpoint(pretrained)
    if mode not in FINETUNE_MODES:
        raise ConfigurationError(f"unknown fine-tuning mode {mode!r}; expected one of {FINETUNE_MODES}")
    spec = pretrained.spec
    if mode == "SVD" and spec.variant != "P2INN":
        raise ConfigurationError(f"SVD modulation needs a P2INN model, got {spec.variant}")
    pool = PointPool([dataset])
    steps = cfg.finetune_epochs * _epoch_steps(len(pool), cfg.batch_size)
    rng = _rng(cfg, salt=0xF1)
    history: list = []
    if cfg.batch_size is None or cfg.batch_size >= len(pool):
        sampler = pool.full
    else:
        sampler = lambda: pool.sample(rng, cfg.batch_size)  # noqa: E731

    if mode == "All":
        weights = pretrained.copy()
        loss = lambda tape, b: compute_loss(Params(tape, weights), b, cfg.weights)  # noqa: E731
        _optimize(weights.theta, loss, sampler, steps, cfg, history, progress=progress)
        return FinetuneResult(weights, mode, weights.theta.size, history, weights.theta)

    if mode == "Shift":
        frozen = pretrained.copy()
        store = np.zeros(sum(n for _, n in shift_layout(spec).values()))
        loss = lambda tape, b: compute_loss(ShiftParams(tape, frozen, store), b, cfg.weights)  # noqa: E731
        _optimize(store, loss, sampler, steps, cfg, history, progress=progress)
        return FinetuneResult(fold_shifts(frozen, store), mode, store.size, history, store)

    from . import modsvd

    factors = modsvd.factorize_decoder(pretrained)
    loss = lambda tape, b: compute_loss(modsvd.ModulatedParams(tape, factors), b, cfg.weights)  # noqa: E731
    _optimize(factors.alpha, loss, sampler, steps, cfg, history, progress=progress)
    return FinetuneResult(factors.fold(), mode, factors.alpha.size, history, factors.alpha, {"factors": factors})


# ---------------------------------------------------------------------------
# history export


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            if isinstance(row, LossBreakdown):
                raise ConfigurationError("history rows must carry their step")
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def read_history(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        if tuple(head) != HISTORY_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected history columns {head}")
        return [(int(row[0]),) + tuple(float(v) for v in row[1:]) for row in r]
