"""Command-line entry point.

Every verb writes ``config.snapshot.toml`` (with command-line overrides
applied) into ``--out`` before doing any work. Exit codes: 0 success,
2 configuration error, 3 numeric error, 4 I/O or file-format error.
"""
import argparse
import logging
import os
import sys

from . import harness
from .backbone import save_backbone
from .config import METHODS, ExperimentConfig, load_config
from .errors import ConfigError, DegenerateInputError, FormatError, LookupFailure, NumericError
from .ensemble import BundleBatch
from .prompts import save_prompt
from .tasks import save_logit_dump

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _methods(values):
    out = []
    for v in values or ():
        out.extend(x.strip() for x in v.split(",") if x.strip())
    return out or None


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p):
    p.add_argument("--config", help="TOML experiment config (defaults used when omitted)")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--seed-offset", type=int, help="first seed of the run")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--method", action="append", help=f"method(s), comma-separated: {', '.join(METHODS)}")
    p.add_argument("--sources", type=int, help="keep the top-k sources by few-shot F1 (0 keeps all)")
    p.add_argument("--shots", type=int, help="few-shot k for train and dev splits")
    p.add_argument("--no-source-adapt", action="store_true",
                   help="ensemble the source prompts without few-shot adaptation")
    p.add_argument("--workers", type=int, help="parallel seed workers")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="sesom", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    for name, text in (("pretrain-backbone", "pretrain and save the frozen backbone"),
                       ("train-sources", "prompt-tune and save every source prompt"),
                       ("run", "evaluate methods over seeds; writes results.csv"),
                       ("analyze-attention", "mean SESoM weights per source; writes weights.csv"),
                       ("case-study", "per-sample source predictions and weights"),
                       ("dump-logits", "write one seed's bundles in the logit-dump format")):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "case-study":
            p.add_argument("--ids", type=_ints, help="test sample ids (default: first 10)")
        if name == "dump-logits":
            p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p = sub.add_parser("sweep", help="sweep the number of sources or the shot count")
    _common(p)
    p.add_argument("--over", choices=("sources", "shots"), required=True)
    p.add_argument("--values", type=_ints, help="values to sweep (default 1,3,5 sources or 8,16,32 shots)")
    return ap


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(methods=_methods(args.method), seed_offset=args.seed_offset,
                              seeds=args.seeds, n_sources=args.sources, shots=args.shots,
                              workers=args.workers,
                              source_adapt=False if args.no_source_adapt else None)


def cmd_pretrain_backbone(cfg, args):
    bb = harness.obtain_backbone(cfg)
    path = os.path.join(args.out, "backbone.bin")
    save_backbone(bb, path)
    print(f"backbone v={bb.v} d={bb.d} sha256={bb.fingerprint()[:16]} -> {path}")


def cmd_train_sources(cfg, args):
    bb = harness.obtain_backbone(cfg)
    for j, p in enumerate(harness.obtain_sources(cfg, bb)):
        path = os.path.join(args.out, f"source{j}.bin")
        save_prompt(p, path)
        print(f"{p.task_id} m={p.m} d={p.d} -> {path}")


def _print_results(results):
    for row in harness.result_rows(results):
        print("  ".join(row))


def cmd_run(cfg, args):
    results = harness.run_experiment(cfg)
    harness.write_results(results, os.path.join(args.out, "results.csv"))
    if "sesom" in results and results["sesom"].weights:
        harness.write_weights([results["sesom"]], os.path.join(args.out, "weights.csv"))
    _print_results(results)
    _report_failures(results)


def _report_failures(results):
    for rr in results.values():
        for seed, msg in rr.failed.items():
            print(f"warning: {rr.method} seed {seed} failed: {msg}", file=sys.stderr)


def cmd_sweep(cfg, args):
    values = args.values or ([1, 3, 5] if args.over == "sources" else [8, 16, 32])
    by_value = harness.sweep(cfg, args.over, values)
    flat = {}
    for k, res in by_value.items():
        for m, rr in res.items():
            flat[(k, m)] = rr
    harness.write_results(flat, os.path.join(args.out, "results.csv"),
                          label=lambda key, rr: f"{rr.method}[{args.over}={key[0]}]")
    for row in harness.result_rows(flat, label=lambda key, rr: f"{rr.method}[{args.over}={key[0]}]"):
        print("  ".join(row))


def cmd_analyze_attention(cfg, args):
    cfg = cfg.with_overrides(methods=["sesom"])
    results = harness.run_experiment(cfg, keep_records=False)
    targets, mat, rs = harness.write_weights([results["sesom"]], os.path.join(args.out, "weights.csv"))
    for t, row, r in zip(targets, mat, rs):
        print(t, " ".join(f"{x:.3f}" for x in row), f"r={r:.3f}")


def cmd_case_study(cfg, args):
    cfg = cfg.with_overrides(methods=["sesom"], seeds=1)
    lab = harness.build_lab(cfg)
    results = harness.run_experiment(cfg, lab=lab)
    ids = args.ids or [s.sample_id for s in lab.test[:10]]
    records = harness.case_study_export(results["sesom"], ids)
    harness.write_jsonl(records, os.path.join(args.out, "case_study.jsonl"))
    for r in records:
        print(r)


def cmd_dump_logits(cfg, args):
    lab = harness.build_lab(cfg)
    seed = cfg.experiment.seed_offset
    state = harness.prepare_seed(lab, seed)
    batch = getattr(state, args.split)
    cols = harness.top_sources(state.dev_f1, cfg.experiment.n_sources)
    batch = BundleBatch(batch.x_hat, batch.logits[:, cols], batch.labels, batch.sample_ids)
    path = os.path.join(args.out, f"logits.{args.split}.bin")
    manifest = {"task": harness.TASK, "split": args.split, "seed": seed,
                "sources": [f"source{c}" for c in cols],
                "verbalizer": list(lab.verbalizer.label_tokens),
                "remap": {str(k): v for k, v in sorted(lab.verbalizer.remap.items())}}
    save_logit_dump(path, batch, manifest)
    print(f"{len(batch)} records, T={batch.T}, v={batch.logits.shape[2]} -> {path}")


COMMANDS = {
    "pretrain-backbone": cmd_pretrain_backbone,
    "train-sources": cmd_train_sources,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "analyze-attention": cmd_analyze_attention,
    "case-study": cmd_case_study,
    "dump-logits": cmd_dump_logits,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
        harness.snapshot(cfg, args.out)
        COMMANDS[args.verb](cfg, args)
    except (ConfigError, LookupFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DegenerateInputError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
