"""Command-line front end: synth, train, infer, annotate, query, eval.

Every subcommand writes machine-readable output to ``--out`` and logs to
standard error. Outputs carry the run's seed: JSON documents embed it, and
JSON-lines files get a ``<out>.meta.json`` sidecar.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import (
    FactorLayout,
    FormatError,
    Hyperparams,
    ValidationError,
    load_dataset,
    load_model,
    load_posteriors,
    save_dataset,
    save_model,
    save_posteriors,
)
from .engine import train
from .infer import DEFAULT_MAX_SWEEPS, DEFAULT_TOL, infer_batch, resolve_threads
from .metrics import DEFAULT_GRID, ap_at_t, average_recall, mar, pr_curve, pr_map
from .sampler import GroundTruth, SamplerParams, sample_dataset, sample_well_separated
from .tasks import OBJECT_SCORES, annotate_given_names, attributes_given_location, free_annotate, query

log = logging.getLogger("wssibp")


def _int_list(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1))


def _write_meta(out, command: str, seed, **extra) -> None:
    _write_json(f"{out}.meta.json", {"command": command, "seed": seed, "version": __version__, **extra})


def _peek_dimension(path) -> int:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    return len(json.loads(line)["patches"][0])
                except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    raise ValidationError(f"{path}: dataset is empty")


def _check_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(f"no such file: {p}")


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> None:
    layout = FactorLayout(k_o=args.ko, k_a=args.ka, k_max=args.kmax, d=args.d)
    params = SamplerParams(
        m=args.m + args.test_m,
        n=args.n,
        k_bg=args.kbg,
        alpha=args.alpha,
        sigma=args.sigma,
        sigma_a=args.sigma_a,
        separation=args.separation,
        label_rate=args.label_rate,
    )
    sampler = sample_well_separated if args.well_separated else sample_dataset
    bags, truth = sampler(layout, params, seed=args.seed)
    save_dataset(bags[: args.m], args.out)
    _write_meta(args.out, "synth", args.seed, layout=layout.to_json(), m=args.m)
    if args.test_m:
        if not args.test_out:
            raise ValidationError("--test-m needs --test-out")
        save_dataset(bags[args.m :], args.test_out)
        _write_meta(args.test_out, "synth", args.seed, layout=layout.to_json(), m=args.test_m)
    truth_path = args.truth or f"{args.out}.truth.json"
    truth.save(truth_path)
    log.info("wrote %d bags to %s, ground truth to %s (seed %d)", len(bags), args.out, truth_path, args.seed)


def cmd_train(args) -> None:
    _check_inputs(args.data)
    layout = FactorLayout(k_o=args.ko, k_a=args.ka, k_max=args.kmax, d=_peek_dimension(args.data))
    hyper = Hyperparams(
        alpha=args.alpha,
        sigma=args.sigma,
        sigma_a=args.sigma_a,
        max_sweeps=args.max_sweeps,
        tol=args.tol,
        seed=args.seed,
    )
    bags = load_dataset(args.data, layout)
    log.info("training on %d bags, seed %d", len(bags), args.seed)
    model, trace = train(bags, layout, hyper, eta_literal=args.eta_literal)
    save_model(model, args.out)
    trace_path = args.trace or f"{args.out}.trace.json"
    _write_json(trace_path, {"seed": args.seed, "eta_literal": args.eta_literal, "trace": trace})
    log.info("%d sweeps, final objective %.10g; model %s, trace %s", len(trace) - 1, trace[-1], args.out, trace_path)


def cmd_infer(args) -> None:
    _check_inputs(args.model, args.data)
    model = load_model(args.model)
    bags = load_dataset(args.data, model.layout)
    hyper = model.hyper
    threads = resolve_threads(args.threads)
    posts = infer_batch(
        model,
        bags,
        hyper,
        tol=args.tol,
        max_sweeps=args.max_sweeps,
        seed=args.seed,
        eta_literal=args.eta_literal,
        threads=threads,
    )
    save_posteriors(posts, args.out)
    _write_meta(args.out, "infer", args.seed, threads=threads, model=str(args.model))
    log.info("inferred %d bags into %s", len(posts), args.out)


def cmd_annotate(args) -> None:
    _check_inputs(args.model, args.posteriors)
    layout = load_model(args.model).layout
    posts = load_posteriors(args.posteriors)
    records = []
    for post in posts:
        if args.mode == "free":
            anns = free_annotate(
                post, layout, n_objects=args.n_objects, t=args.t, threshold=args.threshold, score=args.object_score
            )
            records.extend(a.to_json(post.id) for a in anns)
        elif args.mode == "names":
            if args.object is None:
                raise ValidationError("--mode names needs --object")
            records.append(annotate_given_names(post, layout, args.object, args.t).to_json(post.id))
        else:
            if not args.patches:
                raise ValidationError("--mode location needs --patches")
            ranked = attributes_given_location(post, layout, args.patches)
            if args.t is not None:
                ranked = ranked[: args.t]
            records.append({"id": post.id, "patches": args.patches, "attributes": [[a, s] for a, s in ranked]})
    _write_json(args.out, {"seed": args.seed, "mode": args.mode, "annotations": records})
    log.info("wrote %d annotations to %s", len(records), args.out)


def cmd_query(args) -> None:
    _check_inputs(args.model, args.posteriors)
    layout = load_model(args.model).layout
    corpus = [(p.id, p) for p in load_posteriors(args.posteriors)]
    if args.random:
        if layout.k_a == 0:
            raise ValidationError("random queries need at least one attribute factor")
        rng = np.random.default_rng(args.seed)
        specs = [
            (int(rng.integers(layout.k_o)), [int(rng.integers(layout.k_o, layout.k_oa))])
            for _ in range(args.random)
        ]
    else:
        if args.object is None:
            raise ValidationError("query needs --object or --random")
        specs = [(args.object, args.attrs)]
    results = []
    for obj, attrs in specs:
        ranking = query(corpus, layout, obj, attrs)
        results.append(
            {
                "query": {"object": obj, "attrs": attrs},
                "ranking": [{"id": i, "score": s} for i, s in ranking],
            }
        )
    _write_json(args.out, {"seed": args.seed, "queries": results})
    log.info("ran %d queries over %d images", len(results), len(corpus))


def _eval_ap(args, truth: GroundTruth) -> dict:
    _check_inputs(args.predictions)
    doc = json.loads(Path(args.predictions).read_text())
    # Keep only the first (most confident) annotation per image.
    preds = {}
    for ann in doc["annotations"]:
        preds.setdefault(ann["id"], (ann["object"], [a for a, _ in ann["attributes"]]))
    index = {image_id: i for i, image_id in enumerate(truth.ids)}
    gold = {i: truth.object_attributes(index[i]) for i in preds if i in index}
    return {"value": ap_at_t(preds, gold, args.t), "images": len(preds), "t": args.t}


def _eval_map(args, truth: GroundTruth) -> dict:
    _check_inputs(args.posteriors, args.model)
    layout = load_model(args.model).layout
    index = {image_id: i for i, image_id in enumerate(truth.ids)}
    scores, labels = [], []
    for post in load_posteriors(args.posteriors):
        if post.id not in index:
            raise ValidationError(f"missing truth for image {post.id!r}")
        for obj, attrs in sorted(truth.object_attributes(index[post.id]).items()):
            ann = annotate_given_names(post, layout, obj)
            row = np.zeros(layout.k_a)
            for a, s in ann.attributes:
                row[a - layout.k_o] = s
            scores.append(row)
            labels.append([int(layout.k_o + c in attrs) for c in range(layout.k_a)])
    scores, labels = np.asarray(scores), np.asarray(labels)
    if args.pr_csv:
        with open(args.pr_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["attribute", "rank", "precision", "recall"])
            for c in range(layout.k_a):
                if labels[:, c].any():
                    curve = pr_curve(scores[:, c], labels[:, c])
                    for r, (p, rec) in enumerate(zip(curve.precision, curve.recall), start=1):
                        writer.writerow([layout.k_o + c, r, p, rec])
    return {"value": pr_map(scores, labels), "items": int(len(scores))}


def _eval_mar(args, truth: GroundTruth) -> dict:
    _check_inputs(args.predictions)
    doc = json.loads(Path(args.predictions).read_text())
    index = {image_id: i for i, image_id in enumerate(truth.ids)}
    rankings, per_query = [], []
    for q in doc["queries"]:
        obj, attrs = q["query"]["object"], q["query"]["attrs"]
        flags = []
        for item in q["ranking"]:
            if item["id"] not in index:
                raise ValidationError(f"missing truth for image {item['id']!r}")
            flags.append(int(truth.colocated(index[item["id"]], obj, attrs)))
        rankings.append(flags)
        per_query.append(average_recall(flags))
    return {"value": mar(rankings), "queries": len(rankings), "per_query": per_query, "grid": DEFAULT_GRID.tolist()}


def cmd_eval(args) -> None:
    _check_inputs(args.truth)
    truth = GroundTruth.load(args.truth)
    handlers = {"ap@t": _eval_ap, "map": _eval_map, "mar": _eval_mar}
    report = handlers[args.metric](args, truth)
    report = {"seed": args.seed, "metric": args.metric, **report}
    _write_json(args.out, report)
    log.info("%s = %.6f", args.metric, report["value"])


# -- parser ----------------------------------------------------------------


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def _common() -> argparse.ArgumentParser:
    # Built fresh per subcommand: parents share Action objects, so a shared
    # instance would leak per-subcommand defaults across subcommands.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $SIBP_THREADS or 1)")
    common.add_argument("--out", required=True, help="output path")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return common


def _layout() -> argparse.ArgumentParser:
    layout = argparse.ArgumentParser(add_help=False)
    layout.add_argument("--ko", type=int, default=4)
    layout.add_argument("--ka", type=int, default=6)
    layout.add_argument("--kmax", type=int, default=20)
    return layout


def _hyper() -> argparse.ArgumentParser:
    hyper = argparse.ArgumentParser(add_help=False)
    hyper.add_argument("--alpha", type=_float, default=2.0)
    hyper.add_argument("--sigma", type=_float, default=0.5)
    hyper.add_argument("--sigma-a", dest="sigma_a", type=_float, default=1.0)
    return hyper


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="wssibp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("synth", parents=[_common(), _layout(), _hyper()], help="sample a synthetic corpus")
    p.add_argument("--m", type=int, default=200)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--kbg", type=int, default=3)
    p.add_argument("--separation", type=_float, default=None)
    p.add_argument("--label-rate", dest="label_rate", type=_float, default=0.5)
    p.add_argument("--well-separated", dest="well_separated", action="store_true")
    p.add_argument("--test-m", dest="test_m", type=int, default=0, help="extra bags written to --test-out")
    p.add_argument("--test-out", dest="test_out")
    p.add_argument("--truth", help="ground-truth sidecar (default: <out>.truth.json)")
    p.set_defaults(func=cmd_synth)
    subs["synth"] = p

    p = sub.add_parser("train", parents=[_common(), _layout(), _hyper()], help="fit a model to labeled bags")
    p.add_argument("--data", required=True)
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int, default=200)
    p.add_argument("--tol", type=_float, default=1e-5)
    p.add_argument("--eta-literal", dest="eta_literal", action="store_true")
    p.add_argument("--trace", help="objective trace path (default: <out>.trace.json)")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("infer", parents=[_common()], help="posteriors for bags under a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--max-sweeps", dest="max_sweeps", type=int, default=DEFAULT_MAX_SWEEPS)
    p.add_argument("--tol", type=_float, default=DEFAULT_TOL)
    p.add_argument("--eta-literal", dest="eta_literal", action="store_true")
    p.set_defaults(func=cmd_infer, seed=None)
    subs["infer"] = p

    p = sub.add_parser("annotate", parents=[_common()], help="annotate images from posteriors")
    p.add_argument("--model", required=True)
    p.add_argument("--posteriors", required=True)
    p.add_argument("--mode", choices=["free", "names", "location"], default="free")
    p.add_argument("--n-objects", dest="n_objects", type=int, default=1)
    p.add_argument("--threshold", type=_float, default=None)
    p.add_argument("--object-score", dest="object_score", choices=list(OBJECT_SCORES), default="pi_mean")
    p.add_argument("--t", type=int, default=None)
    p.add_argument("--object", type=int, default=None)
    p.add_argument("--patches", type=_int_list, default=None)
    p.set_defaults(func=cmd_annotate)
    subs["annotate"] = p

    p = sub.add_parser("query", parents=[_common()], help="rank images for object+attribute conjunctions")
    p.add_argument("--model", required=True)
    p.add_argument("--posteriors", required=True)
    p.add_argument("--object", type=int, default=None)
    p.add_argument("--attrs", type=_int_list, default=[])
    p.add_argument("--random", type=int, default=0, help="run this many random object+attribute queries")
    p.set_defaults(func=cmd_query)
    subs["query"] = p

    p = sub.add_parser("eval", parents=[_common()], help="score task outputs against ground truth")
    p.add_argument("--metric", choices=["ap@t", "map", "mar"], required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--predictions", help="annotate output (ap@t) or query output (mar)")
    p.add_argument("--posteriors", help="posteriors (map)")
    p.add_argument("--model", help="model (map)")
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--pr-csv", dest="pr_csv", help="write PR points for map")
    p.set_defaults(func=cmd_eval)
    subs["eval"] = p
    return parser, subs


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(config, dict):
            parser.error("config file must hold a JSON object")
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(config) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in config.items()})
        args = parser.parse_args(argv)
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        args.func(args)
    except Exception as exc:  # one-line diagnostic instead of a traceback
        log.debug("failure details", exc_info=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"wssibp {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
