"""Network definitions: PINN, PINN-R, PINN-P, LargePINN and P2INN.

All weights of a network live in one flat float64 vector ``theta``; a layer
table maps each fully connected layer to its (row-major) weight slice and its
bias slice.  Forward passes take a :class:`Params` object which turns layer
slices into tape nodes, so the same forward code serves plain training,
frozen evaluation, shift modulation and SVD modulation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import jetad
from .errors import (
    CheckpointLengthError,
    CheckpointParseError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
)
from .jetad import Jet, Tape

VARIANTS = ("PINN", "PINN-R", "PINN-P", "LargePINN", "P2INN")
JOINT_VARIANTS = ("PINN-P", "P2INN")
INIT_SCHEMES = ("glorot", "fan_in")

CHECKPOINT_MAGIC = "p2inn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    For the MLP variants ``layers`` counts affine layers (6 means five hidden
    layers of width ``hidden_dim`` plus the output layer).  For P2INN the
    three depths describe the parameter encoder, the coordinate encoder and
    the manifold network; ``param_hidden_dim`` is the parameter encoder width.
    """

    variant: str
    input_dim: int = 2
    param_dim: int = 0
    hidden_dim: int = 50
    layers: int = 6
    param_hidden_dim: int = 150
    depth_p: int = 4
    depth_c: int = 3
    depth_g: int = 5
    activation: str = "tanh"
    final_layer_linear: bool = True
    skips: bool = False
    output_dim: int = 1
    init: str = "glorot"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown network variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant in JOINT_VARIANTS and self.param_dim < 1:
            raise ConfigurationError(f"{self.variant} needs param_dim >= 1")
        if self.variant == "P2INN":
            if min(self.depth_p, self.depth_c) < 1 or self.depth_g < 2:
                raise ConfigurationError("P2INN depths must be depth_p, depth_c >= 1 and depth_g >= 2")
        elif self.layers < 2:
            raise ConfigurationError("an MLP needs at least two affine layers")
        if min(self.input_dim, self.hidden_dim, self.param_hidden_dim, self.output_dim) < 1:
            raise ConfigurationError("all widths must be positive")
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"unknown init scheme {self.init!r}; expected one of {INIT_SCHEMES}")

    @property
    def joint(self) -> bool:
        return self.variant in JOINT_VARIANTS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def pinn(input_dim=2, hidden_dim=50, layers=6) -> NetworkSpec:
    return NetworkSpec("PINN", input_dim=input_dim, hidden_dim=hidden_dim, layers=layers)


def pinn_r(input_dim=2, hidden_dim=50, layers=6) -> NetworkSpec:
    return NetworkSpec("PINN-R", input_dim=input_dim, hidden_dim=hidden_dim, layers=layers, skips=True)


def large_pinn(input_dim=2, hidden_dim=143, layers=6) -> NetworkSpec:
    return NetworkSpec("LargePINN", input_dim=input_dim, hidden_dim=hidden_dim, layers=layers)


def pinn_p(input_dim=2, param_dim=3, hidden_dim=150, layers=6) -> NetworkSpec:
    return NetworkSpec("PINN-P", input_dim=input_dim, param_dim=param_dim, hidden_dim=hidden_dim, layers=layers)


def p2inn(input_dim=2, param_dim=3, hidden_dim=50, param_hidden_dim=150,
          depth_p=4, depth_c=3, depth_g=5) -> NetworkSpec:
    return NetworkSpec("P2INN", input_dim=input_dim, param_dim=param_dim, hidden_dim=hidden_dim,
                       param_hidden_dim=param_hidden_dim, depth_p=depth_p, depth_c=depth_c, depth_g=depth_g)


def default_spec(variant: str, input_dim: int = 2, param_dim: int = 3, **overrides) -> NetworkSpec:
    """Standard architecture for ``variant``; keyword overrides replace spec fields."""
    makers = {
        "PINN": lambda: pinn(input_dim),
        "PINN-R": lambda: pinn_r(input_dim),
        "LargePINN": lambda: large_pinn(input_dim),
        "PINN-P": lambda: pinn_p(input_dim, param_dim),
        "P2INN": lambda: p2inn(input_dim, param_dim),
    }
    if variant not in makers:
        raise ConfigurationError(f"unknown network variant {variant!r}")
    return replace(makers[variant](), **overrides) if overrides else makers[variant]()


@dataclass(frozen=True)
class LayerSlot:
    name: str
    fan_in: int
    fan_out: int
    w_start: int
    b_start: int

    @property
    def stop(self) -> int:
        return self.b_start + self.fan_out


def layer_widths(spec: NetworkSpec) -> list[tuple[str, int, int]]:
    """(name, fan_in, fan_out) for every affine layer, in storage order."""
    if spec.variant == "P2INN":
        out = []
        dims = [spec.param_dim] + [spec.param_hidden_dim] * spec.depth_p
        out += [(f"p{i}", dims[i], dims[i + 1]) for i in range(spec.depth_p)]
        dims = [spec.input_dim] + [spec.hidden_dim] * spec.depth_c
        out += [(f"c{i}", dims[i], dims[i + 1]) for i in range(spec.depth_c)]
        dims = [spec.hidden_dim + spec.param_hidden_dim] + [spec.hidden_dim] * (spec.depth_g - 1) + [spec.output_dim]
        out += [(f"g{i}", dims[i], dims[i + 1]) for i in range(spec.depth_g)]
        return out
    fan0 = spec.input_dim + (spec.param_dim if spec.variant == "PINN-P" else 0)
    dims = [fan0] + [spec.hidden_dim] * (spec.layers - 1) + [spec.output_dim]
    return [(f"fc{i}", dims[i], dims[i + 1]) for i in range(spec.layers)]


def layer_table(spec: NetworkSpec) -> list[LayerSlot]:
    slots, pos = [], 0
    for name, fi, fo in layer_widths(spec):
        slots.append(LayerSlot(name, fi, fo, pos, pos + fi * fo))
        pos += fi * fo + fo
    return slots


def count_params(spec: NetworkSpec) -> int:
    return sum(fi * fo + fo for _, fi, fo in layer_widths(spec))


@dataclass
class NetworkWeights:
    spec: NetworkSpec
    theta: np.ndarray
    slots: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        n = count_params(self.spec)
        if self.theta.shape != (n,):
            raise ConfigurationError(f"{self.spec.variant} needs {n} parameters, got {self.theta.shape}")
        self.slots = {s.name: s for s in layer_table(self.spec)}

    def layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) views; W has shape (fan_out, fan_in)."""
        s = self.slots[name]
        W = self.theta[s.w_start:s.b_start].reshape(s.fan_out, s.fan_in)
        return W, self.theta[s.b_start:s.stop]

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.spec, self.theta.copy())


def init_weights(spec: NetworkSpec, seed: int) -> NetworkWeights:
    """Deterministic per seed.

    ``glorot``: Glorot-uniform weights, zero biases (default).
    ``fan_in``: weights and biases uniform in +-1/sqrt(fan_in), the usual
    default of deep-learning frameworks' dense layers.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(count_params(spec))
    for s in layer_table(spec):
        if spec.init == "fan_in":
            lim = 1.0 / np.sqrt(s.fan_in)
            theta[s.w_start:s.b_start] = rng.uniform(-lim, lim, size=s.fan_in * s.fan_out)
            theta[s.b_start:s.stop] = rng.uniform(-lim, lim, size=s.fan_out)
        else:
            lim = np.sqrt(6.0 / (s.fan_in + s.fan_out))
            theta[s.w_start:s.b_start] = rng.uniform(-lim, lim, size=s.fan_in * s.fan_out)
    return NetworkWeights(spec, theta)


# ---------------------------------------------------------------------------
# parameter providers


class Params:
    """Serves layer weights of ``weights`` to a forward pass on ``tape``.

    With ``trainable=True`` each layer becomes a parameter slot of
    ``weights.theta``; otherwise a constant.  ``shifts`` maps layer names to
    tape nodes added to that layer's bias (shift modulation).
    """

    def __init__(self, tape: Tape, weights: NetworkWeights, trainable: bool = True, shifts=None):
        self.tape = tape
        self.weights = weights
        self.spec = weights.spec
        self.trainable = trainable
        self.shifts = shifts or {}
        self._cache = {}

    def layer(self, name: str):
        if name not in self._cache:
            self._cache[name] = self._make(name)
        return self._cache[name]

    def _make(self, name):
        s = self.weights.slots[name]
        if self.trainable:
            W = self.tape.param(self.weights.theta, s.w_start, (s.fan_out, s.fan_in))
            b = self.tape.param(self.weights.theta, s.b_start, (s.fan_out,))
        else:
            W_, b_ = self.weights.layer(name)
            W, b = self.tape.const(W_), self.tape.const(b_)
        if name in self.shifts:
            b = self.tape.apply(jetad._Add, [b, self.shifts[name]], sign=1.0)
        return W, b


def hidden_layer_names(spec: NetworkSpec) -> list[str]:
    """Layers whose output is a hidden activation of the solution-producing MLP.

    For P2INN these are the manifold network layers except the last; for the
    plain MLPs, every layer except the output layer.
    """
    names = [n for n, _, _ in layer_widths(spec)]
    if spec.variant == "P2INN":
        return [n for n in names if n.startswith("g")][:-1]
    return names[:-1]


# ---------------------------------------------------------------------------
# forward passes


def _mlp(params: Params, h: Jet, names, last_linear: bool, skips: bool = False) -> Jet:
    act = params.spec.activation
    for i, name in enumerate(names):
        W, b = params.layer(name)
        z = jetad.jet_affine(h, W, b)
        if i == len(names) - 1 and last_linear:
            return z
        a = jetad.jet_activate(z, act)
        if skips and a.width == h.width:
            a = jetad.jet_add(a, h)
        h = a
    return h


def _mu_rows(mu, param_dim):
    mu = np.asarray(mu, dtype=np.float64)
    if mu.ndim == 1:
        mu = mu[None]
    if mu.ndim != 2 or mu.shape[1] != param_dim:
        raise ConfigurationError(f"parameter vector must have {param_dim} entries, got shape {mu.shape}")
    return mu


def forward_p2inn(params: Params, coords: Jet, mu, index=None) -> Jet:
    """u(x, t; mu) = g_g([g_c(x, t); g_p(mu)]).

    ``mu`` is one parameter vector or an (M, P) table of them, ``index`` maps
    each of the N coordinate rows to its row of ``mu``.  The parameter encoder
    runs once per distinct mu on plain values; the concatenation is realised
    by splitting the first manifold layer column-wise, which is algebraically
    the same affine map.
    """
    spec = params.spec
    if spec.variant != "P2INN":
        raise ConfigurationError(f"forward_p2inn called with a {spec.variant} spec")
    if coords.width != spec.input_dim:
        raise ConfigurationError(f"coordinates have width {coords.width}, spec expects {spec.input_dim}")
    mu = _mu_rows(mu, spec.param_dim)
    if index is None:
        if mu.shape[0] != 1:
            raise ConfigurationError("index is required when several parameter vectors are given")
        index = np.zeros(coords.npoints, dtype=np.intp)
    tape = params.tape
    act = spec.activation

    h_param = _mlp(params, jetad.lift(tape, mu), [f"p{i}" for i in range(spec.depth_p)], last_linear=False)
    h_coord = _mlp(params, coords, [f"c{i}" for i in range(spec.depth_c)], last_linear=False)

    W, b = params.layer("g0")
    hc = spec.hidden_dim
    z = jetad.jet_affine(h_coord, jetad.take_columns(tape, W, 0, hc), b)
    zp = jetad.jet_affine(h_param, jetad.take_columns(tape, W, hc, W.value.shape[1]))
    z = jetad.jet_add_value(z, jetad.gather_rows(zp, index))
    if spec.depth_g == 1:
        return z
    h = jetad.jet_activate(z, act)
    return _mlp(params, h, [f"g{i}" for i in range(1, spec.depth_g)], last_linear=spec.final_layer_linear)


def forward_baseline(params: Params, inputs: Jet, skips: bool | None = None) -> Jet:
    """Stacked affine + activation layers with a linear head.

    PINN-R adds identity skips around every hidden layer whose input and
    output widths agree; ``skips`` overrides NetworkSpec.skips.
    """
    spec = params.spec
    if spec.variant == "P2INN":
        raise ConfigurationError("forward_baseline called with a P2INN spec")
    want = spec.input_dim + (spec.param_dim if spec.variant == "PINN-P" else 0)
    if inputs.width != want:
        raise ConfigurationError(f"{spec.variant} expects {want} inputs, got {inputs.width}")
    use_skips = spec.skips if skips is None else skips
    names = [f"fc{i}" for i in range(spec.layers)]
    return _mlp(params, inputs, names, last_linear=spec.final_layer_linear, skips=use_skips)


def network_output(params: Params, points, mu=None, index=None, first=(), second=()) -> Jet:
    """Seed jets at ``points`` and run the forward pass of the network variant."""
    spec = params.spec
    pts = np.asarray(points, dtype=np.float64)
    if spec.variant == "P2INN":
        coords = jetad.seed(params.tape, pts, first, second)
        return forward_p2inn(params, coords, mu, index)
    if spec.variant == "PINN-P":
        rows = _mu_rows(mu, spec.param_dim)
        if index is None:
            index = np.zeros(len(pts), dtype=np.intp)
        pts = np.hstack([pts, rows[index]])
    return forward_baseline(params, jetad.seed(params.tape, pts, first, second))


def predict(weights: NetworkWeights, points, mu=None, index=None) -> np.ndarray:
    """Plain forward evaluation: returns u at each point as a 1-D array."""
    tape = Tape()
    out = network_output(Params(tape, weights, trainable=False), points, mu, index)
    return out.value[:, 0].copy()


@dataclass
class HiddenCodes:
    h_coord: np.ndarray
    h_param: np.ndarray

    @property
    def h_concat(self) -> np.ndarray:
        return np.concatenate([self.h_coord, self.h_param], axis=-1)


def hidden_codes(weights: NetworkWeights, points, mu) -> HiddenCodes:
    """Encoder outputs of a P2INN for inspection (one mu, N points)."""
    spec = weights.spec
    if spec.variant != "P2INN":
        raise ConfigurationError("hidden codes exist only for P2INN")
    params = Params(Tape(), weights, trainable=False)
    hp = _mlp(params, jetad.lift(params.tape, _mu_rows(mu, spec.param_dim)),
              [f"p{i}" for i in range(spec.depth_p)], last_linear=False)
    hc = _mlp(params, jetad.seed(params.tape, points), [f"c{i}" for i in range(spec.depth_c)], last_linear=False)
    n = hc.npoints
    return HiddenCodes(hc.value.copy(), np.repeat(hp.value, n, axis=0))


# ---------------------------------------------------------------------------
# checkpoints
#
# Line-oriented text:
#   line 1   p2inn-checkpoint
#   line 2   format_version <int>
#   line 3   spec <json object>
#   then one or more sections:
#            section <tag> <count>
#            <count> lines, one decimal real each (17 significant digits)
#   last     end


def _fmt(v: float) -> str:
    return format(float(v), ".16e")


def write_checkpoint(path, spec: NetworkSpec, sections: dict[str, np.ndarray], extra: dict | None = None) -> None:
    lines = [CHECKPOINT_MAGIC, f"format_version {CHECKPOINT_VERSION}", "spec " + json.dumps(spec.to_dict(), sort_keys=True)]
    if extra:
        lines.append("meta " + json.dumps(extra, sort_keys=True))
    for tag, arr in sections.items():
        arr = np.asarray(arr, dtype=np.float64).ravel()
        lines.append(f"section {tag} {arr.size}")
        lines.extend(_fmt(v) for v in arr)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[NetworkSpec, dict[str, np.ndarray], dict]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise CheckpointParseError(f"{path}: not a checkpoint file")
    try:
        key, ver = lines[1].split()
        assert key == "format_version"
        ver = int(ver)
    except (IndexError, ValueError, AssertionError):
        raise CheckpointParseError(f"{path}: malformed format_version line") from None
    if ver != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {ver}, this build reads {CHECKPOINT_VERSION}")
    if len(lines) < 3 or not lines[2].startswith("spec "):
        raise CheckpointTruncatedError(f"{path}: missing spec line")
    try:
        spec = NetworkSpec.from_dict(json.loads(lines[2][5:]))
    except (ValueError, TypeError) as exc:
        raise CheckpointParseError(f"{path}: bad spec: {exc}") from None
    pos, meta, sections = 3, {}, {}
    if pos < len(lines) and lines[pos].startswith("meta "):
        meta = json.loads(lines[pos][5:])
        pos += 1
    while True:
        if pos >= len(lines):
            raise CheckpointTruncatedError(f"{path}: file ends without 'end' marker")
        head = lines[pos].split()
        if head == ["end"]:
            break
        if len(head) != 3 or head[0] != "section":
            raise CheckpointParseError(f"{path}:{pos + 1}: expected section header, got {lines[pos]!r}")
        tag, count = head[1], int(head[2])
        body = lines[pos + 1:pos + 1 + count]
        if len(body) < count or any(b.split() in (["end"],) or b.startswith("section ") for b in body):
            raise CheckpointTruncatedError(f"{path}: section {tag} declares {count} values, file is shorter")
        try:
            sections[tag] = np.array([float(b) for b in body])
        except ValueError:
            raise CheckpointParseError(f"{path}: non-numeric entry in section {tag}") from None
        pos += 1 + count
    return spec, sections, meta


def save_checkpoint(weights: NetworkWeights, path, extra: dict | None = None) -> None:
    write_checkpoint(path, weights.spec, {"weights": weights.theta}, extra)


def load_checkpoint(path) -> NetworkWeights:
    spec, sections, _ = read_checkpoint(path)
    if "weights" not in sections:
        raise CheckpointParseError(f"{path}: no weights section")
    theta = sections["weights"]
    n = count_params(spec)
    if theta.size != n:
        raise CheckpointLengthError(f"{path}: {theta.size} weights stored, {spec.variant} spec needs {n}")
    return NetworkWeights(spec, theta)
