"""Config-driven experiment runner.

An experiment config is YAML with ``schema_version: 1``.  Every output file
lives under ``<out>/<name>-<hash8>/`` where the hash covers the whole config
except the output directory, so re-running a config rewrites the same files.

Layout::

    <run>/config.json                     normalized config
    <run>/data/<key>.txt                  datasets (generate)
    <run>/seed<k>/<variant>/model.ckpt    joint models
    <run>/seed<k>/<variant>/<key>/...     per-instance models
    <run>/seed<k>/<variant>/history*.csv  loss histories
    <run>/<variant>/metrics_<split>.csv   all seeds + aggregate rows
    <run>/<variant>/heatmap_<key>.csv     solution matrices (seed 0 model)
    <run>/heatmaps/exact_<key>.csv
    <run>/<variant>/finetune_<mode>.csv   fine-tuning metrics
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import metrics, modsvd, nets, pdes, train, truth
from .errors import ConfigurationError
from .pdes import CDR, HELMHOLTZ, PdeInstance

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("seen", "interp", "extrap")


# ---------------------------------------------------------------------------
# config


class ConfigError(ConfigurationError):
    """Config validation failure anchored to a source line."""

    def __init__(self, message, source="<config>", line=None):
        self.source, self.line, self.bare = source, line, message
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


def _line_map(text: str) -> dict[tuple, int]:
    """Key path -> 1-based line of that key, from the YAML node tree."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                out[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        out[()] = root.start_mark.line + 1
        walk(root, ())
    return out


SCHEMA = {
    "schema_version": int,
    "name": str,
    "family": str,
    "pde_type": str,
    "range": {"lo": float, "hi": float, "step": float},
    "ic": str,
    "variants": list,
    "per_instance": list,
    "seeds": list,
    "model": {"init": str, "hidden_dim": int, "layers": int, "param_hidden_dim": int,
              "depth_p": int, "depth_c": int, "depth_g": int},
    "train": {k: None for k in ("w1", "w2", "w3", "learning_rate", "iterations", "batch_size", "mode",
                                 "windows", "log_every", "beta1", "beta2", "eps")},
    "dataset": {"collocation": int, "initial": int, "boundary": int, "test": int},
    "solver": {"nx": int, "nt": int},
    "eval": {"seen": bool, "unseen": list, "allow_extrapolation": bool},
    "finetune": {"modes": list, "epochs": int, "targets": list, "pretrained": str, "learning_rate": float},
    "heatmap": {"resolution": list, "targets": list},
    "out": str,
}
REQUIRED = ("schema_version", "name", "family", "pde_type", "range", "variants")


@dataclass
class ExperimentConfig:
    name: str
    family: str
    pde_type: str
    lo: float
    hi: float
    step: float = 1.0
    ic: str | None = "gauss_pi_2"
    variants: list = field(default_factory=lambda: ["P2INN"])
    per_instance: list | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    eval_seen: bool = True
    unseen: list = field(default_factory=list)
    allow_extrapolation: bool = False
    finetune: dict | None = None
    heatmap: dict | None = None
    out: str = "out"
    source: str = "<config>"

    # -- derived ---------------------------------------------------------

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d.pop("source")
        return d

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def run_dir(self, out: str | None = None) -> Path:
        return Path(out or self.out) / f"{self.name}-{self.digest}"

    @property
    def range_label(self) -> str:
        return f"{self.lo:g}~{self.hi:g}"

    def train_config(self, seed: int) -> train.TrainConfig:
        return train.TrainConfig(seed=seed, **self.train)

    def instances(self) -> list[PdeInstance]:
        return pdes.enumerate_instances(self.pde_type, self.lo, self.hi, self.step, self.ic or "gauss_pi_2")

    def per_instance_targets(self) -> list[PdeInstance]:
        if self.per_instance is None:
            return self.instances()
        return [self.make(c) for c in self.per_instance]

    def make(self, coeffs) -> PdeInstance:
        return pdes.make_instance(self.pde_type, coeffs, self.ic or "gauss_pi_2")

    def split_of(self, inst: PdeInstance) -> str:
        seen = {i.mu for i in self.instances()}
        if inst.mu in seen:
            return "seen"
        active = [v for v, on in zip(inst.mu, _active(self.pde_type)) if on]
        inside = all(self.lo <= v <= self.hi for v in active)
        return "interp" if inside else "extrap"

    def unseen_instances(self) -> list[PdeInstance]:
        return [self.make(c) for c in self.unseen]

    def sizes(self) -> truth.DatasetSizes:
        base = truth.DatasetSizes.default(self.family)
        return truth.DatasetSizes(**{**asdict(base), **self.dataset})


def _active(pde_type):
    a = pdes.PDE_TYPES[pde_type]
    return (True,) if a is None else a


def _num(v, path, lines, src, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{'.'.join(map(str, path))} must be a number, got {v!r}", src, lines.get(path))
    if kind is int and v != int(v):
        raise ConfigError(f"{'.'.join(map(str, path))} must be an integer, got {v!r}", src, lines.get(path))
    return kind(v)


def _coeff_list(v, path, lines, src, n_active):
    if not isinstance(v, list):
        raise ConfigError(f"{'.'.join(map(str, path))} must be a list", src, lines.get(path))
    out = []
    for i, c in enumerate(v):
        p = path + (i,)
        c = c if isinstance(c, list) else [c]
        if len(c) != n_active:
            raise ConfigError(f"{'.'.join(map(str, p))}: expected {n_active} coefficient(s), got {len(c)}", src,
                              lines.get(p))
        out.append([_num(x, p, lines, src) for x in c])
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate a YAML experiment config; every error names the offending line."""
    lines = _line_map(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", source, 1)

    def err(msg, path):
        return ConfigError(msg, source, lines.get(path, lines.get(path[:1])))

    for key in raw:
        if key not in SCHEMA:
            raise err(f"unknown key {key!r}", (key,))
        sub = SCHEMA[key]
        if isinstance(sub, dict):
            if not isinstance(raw[key], dict):
                raise err(f"{key} must be a mapping", (key,))
            for k2 in raw[key]:
                if k2 not in sub:
                    raise err(f"unknown key {key}.{k2}", (key, k2))
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}", source, None)
    if raw["schema_version"] != SCHEMA_VERSION:
        raise err(f"schema_version {raw['schema_version']!r} is not supported (expected {SCHEMA_VERSION})",
                  ("schema_version",))
    name = raw["name"]
    if not isinstance(name, str) or not name or any(c in name for c in "/\\ "):
        raise err("name must be a non-empty string without spaces or slashes", ("name",))
    family = raw["family"]
    if family not in pdes.FAMILIES:
        raise err(f"unknown family {family!r}; expected one of {pdes.FAMILIES}", ("family",))
    pde_type = raw["pde_type"]
    if pde_type not in pdes.PDE_TYPES:
        raise err(f"unknown pde_type {pde_type!r}; expected one of {tuple(pdes.PDE_TYPES)}", ("pde_type",))
    if (family == HELMHOLTZ) != (pde_type == "helmholtz"):
        raise err(f"pde_type {pde_type!r} does not belong to family {family!r}", ("pde_type",))
    rng = raw["range"]
    for k in ("lo", "hi"):
        if k not in rng:
            raise err(f"range.{k} is required", ("range",))
    lo, hi = _num(rng["lo"], ("range", "lo"), lines, source), _num(rng["hi"], ("range", "hi"), lines, source)
    step = _num(rng.get("step", 1.0), ("range", "step"), lines, source)
    if step <= 0 or hi < lo:
        raise err(f"empty coefficient range lo={lo} hi={hi} step={step}", ("range",))
    if family == CDR and lo < 0:
        raise err("CDR coefficients must be non-negative", ("range", "lo"))
    ic = raw.get("ic", "gauss_pi_2" if family == CDR else None)
    if family == CDR and ic not in pdes.IC_KINDS:
        raise err(f"unknown ic {ic!r}; expected one of {pdes.IC_KINDS}", ("ic",))
    if family == HELMHOLTZ and "ic" in raw:
        raise err("Helmholtz has no initial condition", ("ic",))
    variants = raw["variants"]
    if not isinstance(variants, list) or not variants:
        raise err("variants must be a non-empty list", ("variants",))
    for i, v in enumerate(variants):
        if v not in nets.VARIANTS:
            raise err(f"unknown variant {v!r}; expected one of {nets.VARIANTS}", ("variants", i))
    n_active = sum(_active(pde_type))
    per_instance = raw.get("per_instance")
    if per_instance is not None:
        per_instance = _coeff_list(per_instance, ("per_instance",), lines, source, n_active)
    seeds = raw.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds:
        raise err("seeds must be a non-empty list", ("seeds",))
    seeds = [_num(s, ("seeds", i), lines, source, int) for i, s in enumerate(seeds)]

    model = dict(raw.get("model") or {})
    if "init" in model and model["init"] not in nets.INIT_SCHEMES:
        raise err(f"unknown model.init {model['init']!r}; expected one of {nets.INIT_SCHEMES}", ("model", "init"))
    for k, v in model.items():
        if k != "init":
            model[k] = _num(v, ("model", k), lines, source, int)
            if model[k] < 1:
                raise err(f"model.{k} must be >= 1", ("model", k))
    for v in variants:
        try:
            nets.default_spec(v, 2, 3 if family == CDR else 1, **model)
        except ConfigurationError as exc:
            raise err(str(exc), ("model",)) from None

    tr = dict(raw.get("train") or {})
    for k, v in tr.items():
        p = ("train", k)
        if k == "mode":
            if v not in train.MODES:
                raise err(f"unknown train.mode {v!r}; expected one of {train.MODES}", p)
        elif k == "batch_size" and v is None:
            pass
        elif k in ("iterations", "batch_size", "windows", "log_every"):
            tr[k] = _num(v, p, lines, source, int)
        else:
            tr[k] = _num(v, p, lines, source)
    if tr.get("mode") == "seq2seq" and family != CDR:
        raise err("seq2seq training needs the CDR family", ("train", "mode"))
    try:
        train.TrainConfig(**tr)
    except ConfigurationError as exc:
        raise err(str(exc), ("train",)) from None

    ds = {k: _num(v, ("dataset", k), lines, source, int) for k, v in (raw.get("dataset") or {}).items()}
    if any(v < 0 for v in ds.values()):
        raise err("dataset sizes must be >= 0", ("dataset",))
    solver = {k: _num(v, ("solver", k), lines, source, int) for k, v in (raw.get("solver") or {}).items()}
    if "nx" in solver and (solver["nx"] < 2 or solver["nx"] & (solver["nx"] - 1)):
        raise err("solver.nx must be a power of two", ("solver", "nx"))

    ev = raw.get("eval") or {}
    unseen = _coeff_list(ev.get("unseen", []), ("eval", "unseen"), lines, source, n_active)
    allow_ex = bool(ev.get("allow_extrapolation", False))

    ft = raw.get("finetune")
    if ft is not None:
        ft = dict(ft)
        modes = ft.get("modes", ["SVD"])
        for i, m in enumerate(modes):
            if m not in train.FINETUNE_MODES:
                raise err(f"unknown fine-tuning mode {m!r}; expected one of {train.FINETUNE_MODES}",
                          ("finetune", "modes", i))
        ft["modes"] = modes
        ft["epochs"] = _num(ft.get("epochs", 15), ("finetune", "epochs"), lines, source, int)
        ft["targets"] = _coeff_list(ft.get("targets", []), ("finetune", "targets"), lines, source, n_active)
        if not ft["targets"]:
            raise err("finetune.targets must list at least one instance", ("finetune",))
        if "SVD" in modes and "P2INN" not in variants and "pretrained" not in ft:
            raise err("SVD fine-tuning needs a P2INN model", ("finetune", "modes"))
        if "learning_rate" in ft:
            ft["learning_rate"] = _num(ft["learning_rate"], ("finetune", "learning_rate"), lines, source)
    hm = raw.get("heatmap")
    if hm is not None:
        hm = dict(hm)
        res = hm.get("resolution", [256, 101] if family == CDR else [101, 101])
        if not (isinstance(res, list) and len(res) == 2 and all(isinstance(r, int) and r >= 2 for r in res)):
            raise err("heatmap.resolution must be two integers >= 2", ("heatmap", "resolution"))
        hm["resolution"] = res
        hm["targets"] = _coeff_list(hm.get("targets", []), ("heatmap", "targets"), lines, source, n_active)

    cfg = ExperimentConfig(name=name, family=family, pde_type=pde_type, lo=lo, hi=hi, step=step,
                           ic=ic if family == CDR else None, variants=list(variants), per_instance=per_instance,
                           seeds=seeds, model=model, train=tr, dataset=ds, solver=solver, eval_seen=bool(ev.get("seen", True)),
                           unseen=unseen, allow_extrapolation=allow_ex, finetune=ft, heatmap=hm,
                           out=str(raw.get("out", "out")), source=source)
    # enum checks above ran first; now instance-level validation
    try:
        cfg.instances()
        targets = cfg.unseen_instances() + cfg.per_instance_targets()
    except ConfigurationError as exc:
        raise err(str(exc), ("range",)) from None
    for i, inst in enumerate(cfg.unseen_instances()):
        if cfg.split_of(inst) == "extrap" and not allow_ex:
            raise err(f"unseen instance {inst.key} lies outside the training range {cfg.range_label}; "
                      "set eval.allow_extrapolation: true to evaluate it", ("eval", "unseen", i))
    del targets
    return cfg


def preset_names() -> list[str]:
    root = resources.files("p2inn") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    f = resources.files("p2inn") / "presets" / f"{name}.yaml"
    if not f.is_file():
        raise ConfigError(f"no such preset; available: {', '.join(preset_names())}", name)
    return f.read_text()


def load_config(path_or_preset) -> ExperimentConfig:
    """A YAML file path, or the name of a bundled preset."""
    p = Path(path_or_preset)
    if p.is_file():
        return parse_config(p.read_text(), str(p))
    if p.suffix in (".yaml", ".yml") or p.parent != Path("."):
        raise ConfigError("config file not found", str(p))
    return parse_config(preset_text(str(path_or_preset)), f"preset:{path_or_preset}")


# ---------------------------------------------------------------------------
# ground truth cache


class TruthCache:
    """Solver grids and datasets for one experiment, computed once per instance."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._grids = {}
        self._data = {}

    def grid(self, inst: PdeInstance):
        if inst.family != CDR:
            return None
        if inst.mu not in self._grids:
            self._grids[inst.mu] = truth.solve_cdr(inst, **self.cfg.solver)
        return self._grids[inst.mu]

    def dataset(self, inst: PdeInstance) -> truth.Dataset:
        if inst.mu not in self._data:
            self._data[inst.mu] = truth.sample_dataset(inst, self.grid(inst), seed=0, sizes=self.cfg.sizes())
        return self._data[inst.mu]


def generate(cfg: ExperimentConfig, out: str | None = None) -> list[Path]:
    """Write every dataset the experiment touches (training, unseen, fine-tune targets)."""
    run = cfg.run_dir(out)
    (run / "data").mkdir(parents=True, exist_ok=True)
    cache = TruthCache(cfg)
    paths = []
    for inst in _all_instances(cfg):
        p = run / "data" / f"{_fname(inst.key)}.txt"
        truth.export_dataset(cache.dataset(inst), p)
        paths.append(p)
    _write_config(cfg, run)
    return paths


def _all_instances(cfg):
    seen, out = set(), []
    extra = cfg.unseen_instances() + cfg.per_instance_targets()
    if cfg.finetune:
        extra += [cfg.make(c) for c in cfg.finetune["targets"]]
    for inst in cfg.instances() + extra:
        if inst.mu not in seen:
            seen.add(inst.mu)
            out.append(inst)
    return out


def _fname(key: str) -> str:
    return key.replace(",", "_")


def _write_config(cfg, run: Path):
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg.canonical(), sort_keys=True, indent=1, default=float) + "\n")


# ---------------------------------------------------------------------------
# jobs


def _spec_for(cfg: ExperimentConfig, variant: str) -> nets.NetworkSpec:
    param_dim = len(cfg.instances()[0].mu)
    return nets.default_spec(variant, 2, param_dim, **cfg.model)


@dataclass
class Job:
    cfg: ExperimentConfig
    variant: str
    seed: int
    out: str | None
    instance: PdeInstance | None = None  # None for joint training


def _model_dir(job: Job) -> Path:
    d = job.cfg.run_dir(job.out) / f"seed{job.seed}" / job.variant
    if job.instance is not None:
        d = d / _fname(job.instance.key)
    return d


def _train_job(job: Job) -> dict:
    cfg = job.cfg
    cache = TruthCache(cfg)
    tcfg = cfg.train_config(job.seed)
    spec = _spec_for(cfg, job.variant)
    d = _model_dir(job)
    d.mkdir(parents=True, exist_ok=True)
    if job.instance is None:
        ds = [cache.dataset(i) for i in cfg.instances()]
        res = train.train_joint(spec, ds, tcfg)
        train.write_history(res.history, d / "history.csv")
        nets.save_checkpoint(res.weights, d / "model.ckpt", {"seed": job.seed, "mode": "joint"})
        return {"path": str(d / "model.ckpt")}
    ds = cache.dataset(job.instance)
    if tcfg.mode == "seq2seq":
        res = train.train_seq2seq(spec, ds, tcfg)
        train.write_history(res.history, d / "history.csv")
        for w, snap in enumerate(res.snapshots):
            nets.save_checkpoint(snap, d / f"window{w}.ckpt", {"seed": job.seed, "window": w,
                                                                 "edges": [float(e) for e in res.windows]})
        return {"path": str(d)}
    res = train.train_per_instance(spec, ds, tcfg)
    train.write_history(res.history, d / "history.csv")
    nets.save_checkpoint(res.weights, d / "model.ckpt", {"seed": job.seed, "mode": "per-instance"})
    return {"path": str(d / "model.ckpt")}


def train_jobs(cfg: ExperimentConfig, out=None, seeds=None) -> list[Job]:
    jobs = []
    for seed in seeds if seeds is not None else cfg.seeds:
        for v in cfg.variants:
            if v in nets.JOINT_VARIANTS:
                jobs.append(Job(cfg, v, seed, out))
            else:
                jobs.extend(Job(cfg, v, seed, out, inst) for inst in cfg.per_instance_targets())
    return jobs


def run_jobs(fn, jobs, workers: int = 1) -> list:
    """Run independent jobs; results come back in job order (join barrier at the end)."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def train_all(cfg, out=None, seeds=None, workers=1):
    _write_config(cfg, cfg.run_dir(out))
    return run_jobs(_train_job, train_jobs(cfg, out, seeds), workers)


# ---------------------------------------------------------------------------
# evaluation


class Model:
    """A trained model that can be queried at (points, mu)."""

    def __init__(self, weights=None, seq=None, factors=None):
        self.weights, self.seq, self.factors = weights, seq, factors

    def predict(self, points, inst: PdeInstance) -> np.ndarray:
        mu = inst.mu_vector
        if self.seq is not None:
            return self.seq.predict(points, mu)
        if self.factors is not None:
            return modsvd.predict_modulated(self.factors, points, mu)
        spec = self.weights.spec
        return nets.predict(self.weights, points, mu if spec.param_dim else None)


def load_model(job: Job) -> Model:
    d = _model_dir(job)
    windows = sorted(d.glob("window*.ckpt"), key=lambda p: int(p.stem[6:]))
    if windows:
        snaps = [nets.load_checkpoint(p) for p in windows]
        _, _, meta = nets.read_checkpoint(windows[0])
        return Model(seq=train.Seq2SeqResult(np.array(meta["edges"]), snaps, []))
    p = d / "model.ckpt"
    if not p.is_file():
        raise ConfigurationError(f"no trained model at {p}; run 'train' first")
    return Model(weights=nets.load_checkpoint(p))


def eval_instances(cfg: ExperimentConfig, variant: str) -> dict[str, list[PdeInstance]]:
    out = {s: [] for s in SPLITS}
    if variant in nets.JOINT_VARIANTS:
        if cfg.eval_seen:
            out["seen"] = cfg.instances()
        for inst in cfg.unseen_instances():
            out[cfg.split_of(inst)].append(inst)
    else:
        out["seen"] = cfg.per_instance_targets()
    return out


def evaluate_all(cfg: ExperimentConfig, out=None, seeds=None) -> dict[str, dict[str, metrics.MetricsReport]]:
    """Evaluate every trained model on its test points; writes metrics_<split>.csv per variant."""
    cache = TruthCache(cfg)
    run = cfg.run_dir(out)
    reports = {}
    for v in cfg.variants:
        splits = eval_instances(cfg, v)
        reps = {s: metrics.MetricsReport() for s in SPLITS}
        for seed in seeds if seeds is not None else cfg.seeds:
            joint = v in nets.JOINT_VARIANTS
            shared = load_model(Job(cfg, v, seed, out)) if joint else None
            for split, insts in splits.items():
                for inst in insts:
                    model = shared or load_model(Job(cfg, v, seed, out, inst))
                    ds = cache.dataset(inst)
                    pred = model.predict(ds.test, inst)
                    reps[split].add(metrics.evaluate(pred, ds.test_values, cfg.pde_type, cfg.range_label,
                                                     inst.key, seed))
        (run / v).mkdir(parents=True, exist_ok=True)
        for split, rep in reps.items():
            if rep.rows:
                rep.write_csv(run / v / f"metrics_{split}.csv")
        reports[v] = {s: r for s, r in reps.items() if r.rows}
    return reports


# ---------------------------------------------------------------------------
# fine-tuning


def finetune_all(cfg: ExperimentConfig, out=None, seeds=None) -> dict[str, metrics.MetricsReport]:
    """Fine-tune the pretrained joint model on each target; metrics before and after."""
    ft = cfg.finetune
    if not ft:
        raise ConfigurationError("config has no finetune section")
    cache = TruthCache(cfg)
    run = cfg.run_dir(out)
    variant = "P2INN" if "P2INN" in cfg.variants else next(v for v in cfg.variants if v in nets.JOINT_VARIANTS)
    tr = dict(cfg.train)
    if "learning_rate" in ft:
        tr["learning_rate"] = ft["learning_rate"]
    reports = {m: metrics.MetricsReport() for m in ["pretrained"] + list(ft["modes"])}
    for seed in seeds if seeds is not None else cfg.seeds:
        if "pretrained" in ft:
            base = nets.load_checkpoint(ft["pretrained"])
        else:
            base = load_model(Job(cfg, variant, seed, out)).weights
        tcfg = train.TrainConfig(seed=seed, **{**tr, "finetune_epochs": ft["epochs"]})
        for c in ft["targets"]:
            inst = cfg.make(c)
            ds = cache.dataset(inst)
            pred = nets.predict(base, ds.test, inst.mu_vector)
            reports["pretrained"].add(metrics.evaluate(pred, ds.test_values, cfg.pde_type, cfg.range_label,
                                                       inst.key, seed))
            for mode in ft["modes"]:
                res = train.finetune(base, ds, mode, tcfg)
                d = run / f"seed{seed}" / variant / f"finetune_{mode}" / _fname(inst.key)
                d.mkdir(parents=True, exist_ok=True)
                train.write_history(res.history, d / "history.csv")
                if mode == "SVD":
                    modsvd.save_factors(res.extra["factors"], d / "model.ckpt", {"seed": seed})
                else:
                    nets.save_checkpoint(res.weights, d / "model.ckpt", {"seed": seed, "finetune": mode})
                pred = nets.predict(res.weights, ds.test, inst.mu_vector)
                reports[mode].add(metrics.evaluate(pred, ds.test_values, cfg.pde_type, cfg.range_label,
                                                   inst.key, seed))
    (run / variant).mkdir(parents=True, exist_ok=True)
    for m, rep in reports.items():
        rep.write_csv(run / variant / f"finetune_{m}.csv")
    return reports


# ---------------------------------------------------------------------------
# heatmaps


def heatmap_axes(instance: PdeInstance, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Column axis (x) and row axis (t or y) of a uniform evaluation grid.

    CDR: x is periodic so it excludes 2 pi; t includes both ends, so
    resolution (nx, nt + 1) hits the solver grid nodes exactly.
    """
    n1, n2 = (int(r) for r in resolution)
    if n1 < 1 or n2 < 1:
        raise ConfigurationError(f"bad heatmap resolution {resolution}")
    if instance.family == CDR:
        return np.arange(n1) * (pdes.X_MAX / n1), np.linspace(0.0, pdes.T_MAX, n2)
    return np.linspace(-1.0, 1.0, n1), np.linspace(-1.0, 1.0, n2)


def heatmap_values(source, instance: PdeInstance, resolution, grid=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(cols, rows, matrix[rows, cols]) for a model, a solution grid, or the exact solution (source None)."""
    xs, rs = heatmap_axes(instance, resolution)
    X_, R_ = np.meshgrid(xs, rs)
    pts = np.column_stack([X_.ravel(), R_.ravel()])
    if source is None or isinstance(source, truth.SolutionGrid):
        g = source if source is not None else grid
        if instance.family == CDR and g is None:
            g = truth.solve_cdr(instance)
        if instance.family == CDR and len(xs) == g.nx and len(rs) == g.nt + 1:
            vals = g.values.copy()
        else:
            vals = truth.exact_solution(instance, pts, g).reshape(len(rs), len(xs))
    elif isinstance(source, Model):
        vals = source.predict(pts, instance).reshape(len(rs), len(xs))
    elif isinstance(source, nets.NetworkWeights):
        vals = Model(weights=source).predict(pts, instance).reshape(len(rs), len(xs))
    elif isinstance(source, modsvd.SvdFactors):
        vals = Model(factors=source).predict(pts, instance).reshape(len(rs), len(xs))
    elif isinstance(source, train.Seq2SeqResult):
        vals = Model(seq=source).predict(pts, instance).reshape(len(rs), len(xs))
    else:
        raise ConfigurationError(f"cannot draw a heatmap from {type(source).__name__}")
    return xs, rs, vals


def export_heatmap(source, instance: PdeInstance, resolution, path, grid=None) -> Path:
    """Delimited matrix: header row of column coordinates, then one row per t (or y)."""
    xs, rs, vals = heatmap_values(source, instance, resolution, grid)
    axis = "t" if instance.family == CDR else "y"
    lines = [",".join([f"{axis}\\x"] + [repr(float(x)) for x in xs])]
    for r, row in zip(rs, vals):
        lines.append(",".join([repr(float(r))] + [repr(float(v)) for v in row]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [ln.split(",") for ln in Path(path).read_text().splitlines() if ln]
    xs = np.array([float(v) for v in rows[0][1:]])
    rs = np.array([float(r[0]) for r in rows[1:]])
    vals = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return xs, rs, vals


def heatmaps_all(cfg: ExperimentConfig, out=None) -> list[Path]:
    hm = cfg.heatmap
    if not hm:
        return []
    cache = TruthCache(cfg)
    run = cfg.run_dir(out)
    seed = cfg.seeds[0]
    paths = []
    for c in hm["targets"]:
        inst = cfg.make(c)
        name = _fname(inst.key)
        paths.append(export_heatmap(None, inst, hm["resolution"], run / "heatmaps" / f"exact_{name}.csv",
                                    cache.grid(inst)))
        for v in cfg.variants:
            if v in nets.JOINT_VARIANTS:
                model = load_model(Job(cfg, v, seed, out))
            elif inst.mu in {i.mu for i in cfg.per_instance_targets()}:
                model = load_model(Job(cfg, v, seed, out, inst))
            else:
                continue
            paths.append(export_heatmap(model, inst, hm["resolution"], run / v / f"heatmap_{name}.csv"))
    return paths


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Improvement:
    family: str
    metric: str
    baseline: float
    ours: float

    @property
    def percent(self) -> float:
        return metrics.improvement(self.baseline, self.ours)


def compare_runs(baseline_path, ours_path) -> list[Improvement]:
    """Improvement of ``ours`` over ``baseline`` on the aggregate mean abs and rel errors."""
    base_rep, base_agg = metrics.MetricsReport.read_csv(baseline_path)
    ours_rep, ours_agg = metrics.MetricsReport.read_csv(ours_path)
    fam = (ours_rep.rows or base_rep.rows or [metrics.InstanceMetrics("", "", "", 0, 0, 0, 0, 0)])[0].family
    out = []
    for m in ("abs", "rel"):
        b = base_agg["mean"][m] if "mean" in base_agg else base_rep.mean(m)
        o = ours_agg["mean"][m] if "mean" in ours_agg else ours_rep.mean(m)
        out.append(Improvement(fam, m, b, o))
    return out


def format_improvements(rows: list[Improvement]) -> str:
    lines = ["family,metric,baseline,ours,improvement_pct"]
    for r in rows:
        pct = "nan" if math.isnan(r.percent) else f"{r.percent:.2f}"
        lines.append(f"{r.family},{r.metric},{r.baseline:.6g},{r.ours:.6g},{pct}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# full run


def run_experiment(cfg: ExperimentConfig | str, out=None, seeds=None, workers: int = 1) -> dict:
    """generate -> train -> eval -> finetune -> heatmaps; returns the reports."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    generate(cfg, out)
    train_all(cfg, out, seeds, workers)
    result = {"run_dir": str(cfg.run_dir(out)), "eval": evaluate_all(cfg, out, seeds)}
    if cfg.finetune:
        result["finetune"] = finetune_all(cfg, out, seeds)
    result["heatmaps"] = [str(p) for p in heatmaps_all(cfg, out)]
    return result
