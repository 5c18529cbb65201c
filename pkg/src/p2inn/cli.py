"""Command line entry point: ``p2inn <verb> --config <path|preset> [...]``.

Exit codes: 0 success, 2 invalid config or usage, 3 training diverged,
4 missing inputs (e.g. eval before train).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import lab, nets, pdes
from .errors import CheckpointError, ConfigurationError, DivergenceError

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", required=True, help="YAML config file or bundled preset name")
    p.add_argument("--seed", type=int, action="append", help="restrict to this seed (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", default=None, help="output root (overrides the config's 'out')")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p2inn", description="Parameterized PINN laboratory")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    _add_common(sub.add_parser("generate", help="write ground-truth datasets"))
    _add_common(sub.add_parser("train", help="train every variant and seed in the config"))
    _add_common(sub.add_parser("finetune", help="fine-tune the pretrained joint model on the config's targets"))
    _add_common(sub.add_parser("eval", help="evaluate trained models and write metric reports"))
    _add_common(sub.add_parser("run", help="generate, train, eval, finetune and heatmaps in one go"))

    c = sub.add_parser("compare", help="improvement of one metrics report over a baseline report")
    c.add_argument("baseline")
    c.add_argument("ours", nargs="+")
    c.add_argument("--out", default=None, help="write the table to this file as well")

    h = sub.add_parser("heatmap", help="export solution matrices")
    _add_common(h)
    h.add_argument("--resolution", type=int, nargs=2, metavar=("NX", "NT"))
    h.add_argument("--instance", type=float, nargs="+", help="active coefficients (default: config targets)")
    h.add_argument("--checkpoint", help="evaluate this checkpoint instead of the config's models")

    sub.add_parser("presets", help="list bundled presets")
    return ap


def _seeds(args):
    return args.seed


def _heatmap(args, cfg):
    if args.resolution or args.instance or args.checkpoint:
        res = args.resolution or (cfg.heatmap or {}).get("resolution") or ([256, 101] if cfg.family == pdes.CDR else [101, 101])
        targets = [args.instance] if args.instance else (cfg.heatmap or {}).get("targets") or []
        if not targets:
            raise ConfigurationError("no heatmap instance: pass --instance or set heatmap.targets")
        run = cfg.run_dir(args.out)
        paths = []
        for c in targets:
            inst = cfg.make(c)
            name = lab._fname(inst.key)
            paths.append(lab.export_heatmap(None, inst, res, run / "heatmaps" / f"exact_{name}.csv"))
            if args.checkpoint:
                model = lab.Model(weights=nets.load_checkpoint(args.checkpoint))
                paths.append(lab.export_heatmap(model, inst, res, run / "heatmaps" / f"model_{name}.csv"))
        return paths
    return lab.heatmaps_all(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "presets":
            print("\n".join(lab.preset_names()))
            return 0
        if args.verb == "compare":
            tables = []
            for path in args.ours:
                tables.append(lab.format_improvements(lab.compare_runs(args.baseline, path)))
            text = "\n".join(tables)
            print(text)
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text + "\n")
            return 0
        cfg = lab.load_config(args.config)
        if args.verb == "generate":
            for p in lab.generate(cfg, args.out):
                print(p)
        elif args.verb == "train":
            for r in lab.train_all(cfg, args.out, _seeds(args), args.workers):
                print(r["path"])
        elif args.verb == "eval":
            reps = lab.evaluate_all(cfg, args.out, _seeds(args))
            _print_reports(reps)
        elif args.verb == "finetune":
            reps = lab.finetune_all(cfg, args.out, _seeds(args))
            for mode, rep in reps.items():
                print(f"{mode}: mean rel_err {rep.mean('rel'):.4g}")
        elif args.verb == "heatmap":
            for p in _heatmap(args, cfg):
                print(p)
        elif args.verb == "run":
            res = lab.run_experiment(cfg, args.out, _seeds(args), args.workers)
            _print_reports(res["eval"])
            print(res["run_dir"])
    except lab.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        code = EXIT_MISSING if "run 'train' first" in str(exc) else EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return code
    return 0


def _print_reports(reps):
    for variant, splits in reps.items():
        for split, rep in splits.items():
            agg = rep.aggregate()
            print(json.dumps({"variant": variant, "split": split, "mean_rel": agg["mean"]["rel"],
                              "std_rel": agg["std"]["rel"], "mean_abs": agg["mean"]["abs"],
                              "n_instances": agg["n_instances"], "n_seeds": agg["n_seeds"]}))


if __name__ == "__main__":
    sys.exit(main())
