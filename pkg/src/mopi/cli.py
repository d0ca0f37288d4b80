"""Command-line entry point: ``mopi <command> [options] [--dotted.key value ...]``.

Every command that takes ``--config`` also accepts any number of
``--path.to.key value`` overrides, applied to the config before it is
normalized. Values are parsed as JSON when possible (``--alpha 0.05``,
``--methods '[{"name": "SCP"}]'``) and kept as strings otherwise. Method
entries can be addressed by label, e.g. ``--methods.MOPI.solver.lr 0.01``.

Commands
--------
gen         draw one split from the configured generator and write it as CSV
pretrain    fit the frozen components on the pretraining split
fit         calibrate one method and write a self-contained rule file
eval        evaluate a rule file on the test split (or a CSV)
experiment  run all replications and write results CSV + summary JSON
cv          cross-validate the tuned method's hyperparameters
plotdata    turn results CSVs into long-format plot data
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .core import MopiError
from .datagen import export_csv, generate, ingest_csv
from .experiment import (FIGURE_KINDS, ExperimentFailed, _resolve, build_families, config_hash,
                         cross_validate, derive_seed, draw_splits, emit_plotdata, fit_method,
                         generator_spec, normalize_config, parse_override, pretrain_components,
                         run_experiment, scheme_of, set_path)
from .metrics import evaluate_rule
from .serialize import (artifacts_dict, family_components, family_from_dict, family_to_dict,
                        load_artifacts, load_json, rule_from_dict, rule_to_dict, save_json)

log = logging.getLogger("mopi")

ROLES = ("pretrain", "calibration", "test")


class UsageError(MopiError, ValueError):
    pass


def parse_overrides(extra) -> list:
    """``['--a.b', '1', '--c=x']`` -> ``[('a.b', 1), ('c', 'x')]``."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} has no value")
            val = extra[i + 1]
            i += 2
        out.append((key, parse_override(val)))
    return out


def load_config(path, overrides) -> dict:
    cfg = load_json(path) if path else {}
    if any(k.split(".")[0] == "methods" for k, _ in overrides):
        cfg = normalize_config(cfg)  # so overrides can address method defaults
    for key, val in overrides:
        set_path(cfg, key, val)
    return normalize_config(cfg)


def _write_text(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _read_csv_split(path, role):
    meta_path = f"{path}.meta.json"
    if not os.path.exists(meta_path):
        raise UsageError(f"{path} has no {meta_path} schema file")
    return ingest_csv(path, load_json(meta_path)["schema"], role)


# --------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg):
    if cfg["data"] is not None:
        raise UsageError("gen needs a synthetic generator, not a data config")
    k = ROLES.index(args.role)
    n = args.n if args.n is not None else cfg["sizes"][args.role]
    spec = generator_spec(cfg, n, derive_seed(args.seed, 1, k))
    data = generate(spec, args.role)
    export_csv(data, args.out, {"generator": spec.to_dict(), "config_hash": config_hash(cfg)})
    log.info("wrote %d rows to %s", data.n, args.out)


def cmd_pretrain(args, cfg):
    pre, cal, _ = draw_splits(cfg, args.seed)
    comps = pretrain_components(cfg, pre, args.seed)
    mopi_family, base_family = build_families(cfg, comps, cal.d_y)
    doc = {"config_hash": config_hash(cfg), "seed": args.seed,
           "artifacts": artifacts_dict(comps.values()),
           "families": {"mopi": family_to_dict(mopi_family), "base": family_to_dict(base_family)}}
    save_json(doc, args.out)


def cmd_fit(args, cfg):
    doc = load_json(args.artifacts)
    chash = config_hash(cfg)
    if doc["config_hash"] != chash:
        log.warning("artifacts were pretrained under config %s, fitting under %s", doc["config_hash"], chash)
    arts = load_artifacts(doc["artifacts"])
    mopi_family = family_from_dict(doc["families"]["mopi"], arts)
    base_family = family_from_dict(doc["families"]["base"], arts)
    pre, cal, _ = draw_splits(cfg, args.seed)
    if args.cal:
        cal = _read_csv_split(args.cal, "calibration")
    j = _resolve(cfg["methods"], args.method)
    rule = fit_method(cfg["methods"][j], cfg, mopi_family, base_family, pre, cal, derive_seed(args.seed, 4, j), chash)
    save_json({"rule": rule_to_dict(rule), "artifacts": artifacts_dict(family_components(rule.family))}, args.out)


def cmd_eval(args, cfg):
    doc = load_json(args.rule)
    rule = rule_from_dict(doc["rule"], load_artifacts(doc["artifacts"]))
    if args.test:
        test = _read_csv_split(args.test, "test")
    else:
        test = draw_splits(cfg, args.seed)[2]
    metrics = args.metrics.split(",") if args.metrics else cfg["metrics"]
    vals = evaluate_rule(rule, test, float(cfg["alpha"]), metrics, rng=derive_seed(args.seed, 5),
                         scheme=scheme_of(cfg), bins=int(cfg["bins"]))
    _write_text(json.dumps({"method": rule.method, "config_hash": rule.config_hash, "metrics": vals},
                           indent=1, sort_keys=True) + "\n", args.out)


def cmd_experiment(args, cfg):
    res = run_experiment(cfg, args.out, stem=args.stem)
    print(f"config_hash={res.config_hash} rows={len(res.rows)} failed={len(res.failures)}")


def cmd_cv(args, cfg):
    res = cross_validate(cfg, folds=args.folds)
    _write_text(json.dumps({"config_hash": config_hash(cfg), "chosen": res.chosen, "scores": res.scores},
                           indent=1, sort_keys=True) + "\n", args.out)


def cmd_plotdata(args, cfg):
    _write_text(emit_plotdata(args.results, args.kind, metric=args.metric, expected_hash=args.expected_hash),
                args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mopi", allow_abbrev=False, description="Minimax-calibrated prediction sets: experiments and tools.",
                                epilog="Extra --dotted.key value pairs override config entries.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seed=True):
        sp.add_argument("--config", help="JSON config (defaults are used for missing keys)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="replication seed")
        return sp

    sp = with_config(sub.add_parser("gen", allow_abbrev=False, help="write one generated split as CSV"))
    sp.add_argument("--role", choices=ROLES, default="test")
    sp.add_argument("--n", type=int, help="sample size (default: the config's size for this role)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = with_config(sub.add_parser("pretrain", allow_abbrev=False, help="fit pretrained components"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config(sub.add_parser("fit", allow_abbrev=False, help="calibrate one method"))
    sp.add_argument("--artifacts", required=True, help="output of the pretrain command")
    sp.add_argument("--method", default="MOPI", help="method label or index in the config")
    sp.add_argument("--cal", help="calibration CSV written by gen (default: drawn from the config)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = with_config(sub.add_parser("eval", allow_abbrev=False, help="evaluate a rule"))
    sp.add_argument("--rule", required=True)
    sp.add_argument("--test", help="test CSV written by gen (default: drawn from the config)")
    sp.add_argument("--metrics", help="comma-separated metric names (default: the config's)")
    sp.add_argument("--out", help="output JSON (default: stdout)")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("experiment", allow_abbrev=False, help="run replications"), seed=False)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--stem", default="results")
    sp.set_defaults(func=cmd_experiment)

    sp = with_config(sub.add_parser("cv", allow_abbrev=False, help="cross-validate hyperparameters"), seed=False)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--out", help="output JSON (default: stdout)")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("plotdata", allow_abbrev=False, help="long-format plot data from results CSVs")
    sp.add_argument("results", nargs="+")
    sp.add_argument("--kind", required=True, choices=sorted(FIGURE_KINDS))
    sp.add_argument("--metric", help="override the figure kind's default metric")
    sp.add_argument("--expected-hash", help="reject results under any other config hash")
    sp.add_argument("--out", help="output CSV (default: stdout)")
    sp.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(extra)
        if args.command == "plotdata":
            if overrides:
                raise UsageError("plotdata takes no config overrides")
            cfg = None
        else:
            cfg = load_config(args.config, overrides)
        args.func(args, cfg)
    except ExperimentFailed as exc:
        print(f"mopi: {exc}", file=sys.stderr)
        return 3
    except (MopiError, KeyError, ValueError, OSError) as exc:
        print(f"mopi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
