"""Command-line runner.

Exit codes: 0 when every check passes, 1 on a failed check or a run that
could not finish (divergence, exhausted data), 2 on usage or config errors.
"""
import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_env
from .data_pipeline import (
    PLANTED_200,
    CleaningConfig,
    generate_corpus,
    manifest_hash,
    parse_manifest,
    run_cleaning,
    serialize_manifest,
)
from .exceptions import (
    ExhaustedDataError,
    ManifestError,
    RejectedInputError,
    SamplerDivergenceError,
    TrainingDivergenceError,
)
from .experiments import (
    ABLATION_COLUMNS,
    ablate_dropout,
    conditional_errors,
    conditional_task,
    gaps_by_setting,
    gradient_check,
    manifest_batches,
    sp_check,
    train_from_config,
)
from .flow import SamplerConfig, euler_sample
from .seq_parallel import reports_to_csv
from .tensor_core import Rng, mix_seed

logger = logging.getLogger("omniflow")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
METRIC_COLUMNS = ("step", "loss", "n_low", "n_high", "kept_mllm", "kept_tgt", "kept_edit")


def load_config(path):
    if path is None:
        return ExperimentConfig.from_dict(apply_env({}))
    return ExperimentConfig.from_file(path)


def provenance(cfg):
    """Resolved config plus the manifest content hash (``None`` without a manifest)."""
    digest = manifest_hash(cfg.manifest) if cfg.manifest and os.path.exists(cfg.manifest) else None
    return {"config": cfg.to_dict(), "manifest_hash": digest}


def _header(prov):
    return (f"# config: {json.dumps(prov['config'], sort_keys=True)}\n"
            f"# manifest_hash: {prov['manifest_hash']}\n")


def write_csv(path, rows, columns, prov=None):
    buf = io.StringIO()
    if prov is not None:
        buf.write(_header(prov))
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --- subcommands ----------------------------------------------------------

def cmd_train(args):
    cfg = load_config(args.config)
    out = _outdir(args.out)
    prov = provenance(cfg)
    router, log, extra = train_from_config(cfg)
    write_csv(os.path.join(out, "metrics.csv"), log.rows, METRIC_COLUMNS, prov)
    # wall time lives in its own file so metrics.csv stays byte-reproducible
    with open(os.path.join(out, "timing.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"seconds,steps\n{log.seconds:.3f},{len(log.rows)}\n")
    save_checkpoint(os.path.join(out, "checkpoint.bin"), router, prov)
    losses = log.losses
    summary = {**prov, **extra, "n_steps": len(losses),
               "initial_loss": losses[0] if losses else None,
               "final_loss": losses[-1] if losses else None}
    write_json(os.path.join(out, "run.json"), summary)
    print(f"trained {len(losses)} steps; loss {summary['initial_loss']} -> {summary['final_loss']}")
    return EXIT_OK


def cmd_sample(args):
    cfg = load_config(args.config)
    router, _ = load_checkpoint(args.checkpoint)
    prov = provenance(cfg)
    n_samples = args.n_samples or cfg.eval.n_samples
    if cfg.task == "conditional_mean":
        task = conditional_task(router.low_noise.config)
        conds = task.held_out_conditions(cfg.eval.n_conditions)
        zero = tuple(args.zero or ())
        errs = conditional_errors(router, task, conds, n_samples, cfg.sampler_steps, cfg.seed, zero)
        rows = [{"condition": i, "max_abs_error": float(e), "within_tol": int(e < cfg.eval.tolerance)}
                for i, e in enumerate(errs)]
        write_csv(args.out, rows, ("condition", "max_abs_error", "within_tol"), prov)
        frac = float(np.mean(errs < cfg.eval.tolerance))
        print(f"{frac:.0%} of {len(errs)} held-out conditions within {cfg.eval.tolerance}")
        return EXIT_OK
    batches, _ = manifest_batches(cfg)
    batch = next(batches)
    latents = {}
    for i, ex in enumerate(batch):
        rng = Rng(mix_seed("sample", cfg.seed, i))
        latents[f"sample_{i}"] = euler_sample(ex.sources, router, SamplerConfig(cfg.sampler_steps),
                                              rng, ex.latent.shape[:3], n_samples)
    np.savez(args.out, **latents, provenance=json.dumps(prov, sort_keys=True))
    print(f"wrote {len(latents)} sample sets to {args.out}")
    return EXIT_OK


def _corrupt(src, dst, array):
    return array + 1e-3 if (src, dst) == (0, 1) else array


def cmd_sp_check(args):
    cfg = load_config(args.config)
    reports = sp_check(cfg.sp_sweep, cfg.seed, _corrupt if args.corrupt_collective else None)
    text = reports_to_csv(reports)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(_header(provenance(cfg)) + text)
    failed = [r for r in reports if not r.passed()]
    for r in failed:
        print(f"FAIL P={r.n_workers} S={r.seq_len} H={r.n_heads} d_head={r.d_head} "
              f"L_C={r.cond_len}: self err {r.self_max_abs_err:.3e}, cross err "
              f"{r.cross_max_abs_err:.3e}, volumes {r.measured_self_elements}/{r.self_elements} "
              f"and {r.measured_cross_elements}/{r.cross_elements}")
    print(f"sp-check: {len(reports) - len(failed)}/{len(reports)} configurations pass")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    report = gradient_check(cfg.model, cfg.seed, args.break_backward)
    if args.out:
        write_csv(args.out, report.rows(), ("group", "relative_error", "passed"), provenance(cfg))
    print(f"gradcheck: {report.n_entries} entries, worst relative error {report.worst:.3e}"
          f" ({report.worst_group})")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_data_clean(args):
    cfg = load_config(args.config)
    cleaning = cfg.cleaning
    if args.locality_threshold is not None:
        cleaning = CleaningConfig(**{**cleaning.__dict__,
                                     "locality_threshold": args.locality_threshold})
    errors = []
    samples = parse_manifest(args.manifest, strict=args.strict, errors=errors)
    kept, report = run_cleaning(samples, cleaning)
    doc = report.to_dict()
    doc["manifest_hash"] = manifest_hash(args.manifest)
    doc["experiment_config"] = cfg.to_dict()
    doc["skipped_lines"] = [e.line_number for e in errors]
    if args.report_out:
        write_json(args.report_out, doc)
    if args.out:
        serialize_manifest(kept, args.out)
    for st in report.stages:
        print(f"{st.name}: {st.n_in} -> {st.kept} ({st.removed} removed)")
    return EXIT_OK


def cmd_ablate_dropout(args):
    cfg = load_config(args.config)
    rows = ablate_dropout(cfg, zero_segments=args.zero)
    prov = provenance(cfg)
    write_csv(args.out, rows, ABLATION_COLUMNS, prov)
    for key, gaps in gaps_by_setting(rows).items():
        shown = ", ".join(f"seed {s}: {g:+.4f}" for s, g in sorted(gaps.items()))
        print(f"p={key}: error increase under zeroing {shown}")
    return EXIT_OK


def cmd_make_corpus(args):
    defects = PLANTED_200 if args.planted else {}
    samples, expected = generate_corpus(args.n_samples, args.seed, defects)
    serialize_manifest(samples, args.out)
    if args.expected_out:
        write_json(args.expected_out, expected)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="omniflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train a model; writes metrics.csv, checkpoint.bin, run.json")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("sample", cmd_sample, "sample from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--zero", nargs="*", help="segments forced to zero at inference")

    sp = add("sp-check", cmd_sp_check, "sequence-parallel equivalence and volume sweep")
    sp.add_argument("--out", help="CSV report path")
    sp.add_argument("--corrupt-collective", action="store_true", help=argparse.SUPPRESS)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--out", help="CSV report path")
    sp.add_argument("--break-backward", metavar="PARAM", help=argparse.SUPPRESS)

    sp = add("data-clean", cmd_data_clean, "run the four cleaning stages on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="write surviving samples here")
    sp.add_argument("--report-out", help="CleanReport JSON path")
    sp.add_argument("--strict", action="store_true", help="abort on the first malformed line")
    sp.add_argument("--locality-threshold", type=float)

    sp = add("ablate-dropout", cmd_ablate_dropout, "condition-dropout robustness ablation")
    sp.add_argument("--out", required=True)
    sp.add_argument("--zero", nargs="*", help="segments to zero at evaluation")

    sp = add("make-corpus", cmd_make_corpus, "write a synthetic manifest", config=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-samples", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--planted", action="store_true", help="plant the standard 200-sample defects")
    sp.add_argument("--expected-out", help="JSON path for planted per-stage counts")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (RejectedInputError, ManifestError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergenceError, SamplerDivergenceError, ExhaustedDataError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
