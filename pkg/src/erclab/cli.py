"""``erclab`` command line.

Exit status: 0 on success, 2 when the input fails validation (bad or missing
config, manifest, feature file or predictions), 1 for any other failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from erclab.datamodel import load_feature_matrix, load_manifest
from erclab.ensemble import majority_vote, read_prediction_table
from erclab.errors import ValidationError
from erclab.metrics import classification_report
from erclab.runner import evaluate, run_from_file
from erclab.synth import KINDS, generate_synthetic_corpus

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_train(args) -> None:
    _print_json(run_from_file(args.config, repeats=args.repeats))


def cmd_eval(args) -> None:
    _print_json(evaluate(args.predictions, args.manifest).to_dict())


def cmd_ensemble(args) -> None:
    ds = load_manifest(args.manifest)
    table = read_prediction_table(args.predictions, ds.labelset)
    if args.tiebreaker not in table:
        raise ValidationError(f"tiebreaker {args.tiebreaker!r} is not among experts {sorted(table)}")
    voted = majority_vote(table, args.tiebreaker)
    gold = ds.gold_labels()
    unknown = sorted(u for u in voted if u not in gold)
    if unknown:
        raise ValidationError(f"unknown utt_id {unknown[0]!r}")
    scored = sorted(u for u in voted if gold[u] is not None)
    out = {"experts": sorted(table), "tiebreaker": args.tiebreaker, "n_utterances": len(voted)}
    if scored:
        out["report"] = classification_report([gold[u] for u in scored], [voted[u] for u in scored],
                                              ds.num_classes).to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("utt_id,pred_label\n")
            for u in sorted(voted):
                fh.write(f"{u},{ds.labelset.names[voted[u]]}\n")
    _print_json(out)


def cmd_synth(args) -> None:
    path = generate_synthetic_corpus(args.kind, args.out, seed=args.seed, n_conversations=args.conversations,
                                     n_utterances=args.utterances, dim=args.dim)
    print(path)


def cmd_inspect(args) -> None:
    v = load_feature_matrix(args.feature).values
    stats = {"rows": int(v.shape[0]), "cols": int(v.shape[1])}
    if v.size:
        stats.update(min=float(v.min()), max=float(v.max()), mean=float(v.mean(dtype=np.float64)),
                     std=float(v.std(dtype=np.float64)))
    _print_json(stats)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erclab", description="Conversational emotion recognition experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a pipeline from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--repeats", type=int, default=1, help="consecutive seeds; reports mean and sample stdev")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a predictions CSV against manifest gold labels")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", required=True)
    e.set_defaults(func=cmd_eval)

    en = sub.add_parser("ensemble", help="majority vote over utt_id,expert_id,pred_label rows")
    en.add_argument("--predictions", required=True)
    en.add_argument("--tiebreaker", required=True)
    en.add_argument("--manifest", required=True)
    en.add_argument("--out", help="write the voted labels as utt_id,pred_label")
    en.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--kind", required=True, choices=KINDS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--conversations", type=int, default=200)
    s.add_argument("--utterances", type=int, default=8)
    s.add_argument("--dim", type=int, default=16)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="print the shape and summary statistics of an EMF1 file")
    i.add_argument("--feature", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"erclab: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"erclab: invalid input: {exc.filename} not found", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        print(f"erclab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
