"""Command line entry point: ``mcrlab <command> [flags]``.

Every command resolves its paths against ``--workdir``, writes the resolved
config beside its outputs, and finishes with ``summary.json``. Exit codes:
0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
import typing
from pathlib import Path
from typing import Any, Sequence

from .alignment import export_embeddings, pca_scatter
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .data import (DataError, SyntheticSpec, build_vocabulary, generate_corpus, load_manifest,
                   split_dataset, write_corpus)
from .evaluation import embed_corpus, evaluate_recall, grouped_recall, nlg_curves, topk_dump
from .experiments import ARMS, default_corpus, run_arm
from .preprocessing import Vocabulary
from .training import (CheckpointError, EncodedCorpus, init_state, load_checkpoint,
                       resource_report, save_checkpoint, steps_per_epoch, train)

log = logging.getLogger("mcrlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# config flags ------------------------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per ExperimentConfig field; unset flags leave the config alone.

    Flags default to SUPPRESS so an absent flag never shadows the YAML file;
    the help text shows the ExperimentConfig default instead.
    """
    parser.add_argument("--config", help="YAML config file (relative to --workdir)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="extra override, applied after the file (repeatable)")
    group = parser.add_argument_group("experiment config")
    for name, field in ExperimentConfig.model_fields.items():
        flag = "--" + name.replace("_", "-")
        help_text = f"[default: {field.default}]"
        ann = field.annotation
        if ann is bool:
            group.add_argument(flag, dest=f"cfg_{name}", action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=help_text)
        elif typing.get_origin(ann) is typing.Literal:
            group.add_argument(flag, dest=f"cfg_{name}", choices=typing.get_args(ann),
                               default=argparse.SUPPRESS, help=help_text)
        else:
            group.add_argument(flag, dest=f"cfg_{name}", type=ann, default=argparse.SUPPRESS,
                               metavar=ann.__name__.upper(), help=help_text)


def _resolve_config(args, workdir: Path, extra: dict[str, Any] | None = None) -> ExperimentConfig:
    path = workdir / args.config if args.config else None
    overrides: dict[str, Any] = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    overrides.update(extra or {})
    for name in ExperimentConfig.model_fields:
        value = getattr(args, f"cfg_{name}", None)
        if value is not None:
            overrides[name] = value
    return load_config(path, overrides)


# helpers --------------------------------------------------------------------------

def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _finish(out: Path, command: str, result: dict, artifacts: list[Path], workdir: Path,
            timing: dict | None = None) -> dict:
    summary_path = out / "summary.json"
    rel = sorted(str(p.relative_to(workdir)) if p.is_relative_to(workdir) else str(p)
                 for p in artifacts + [summary_path])
    summary = {"command": command, "exit_code": EXIT_OK, "artifacts": rel, "result": result,
               "timing": timing or {}}
    _write_json(summary_path, summary)
    return summary


def _load_pairs(path: Path, config: ExperimentConfig):
    return load_manifest(path, config.image_size, config.channels)


def _load_vocab(path: Path | None) -> Vocabulary:
    if path is None:
        return build_vocabulary()
    if not path.exists():
        raise DataError(f"vocabulary not found: {path}")
    return Vocabulary.load(path)


# commands ---------------------------------------------------------------------------

def cmd_gen_data(args, workdir: Path) -> dict:
    out = workdir / args.out
    spec = SyntheticSpec(n_studies=args.n_studies, image_size=args.image_size,
                         channels=args.channels, grid=args.grid,
                         findings_per_study=tuple(args.findings), views_per_study=tuple(args.views),
                         filler_sentences=tuple(args.fillers), noise=args.noise, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not 0 <= args.n_test <= args.n_studies:
        raise ConfigError(f"n_test: {args.n_test} outside [0, n_studies]")
    t0 = time.perf_counter()
    pairs = generate_corpus(spec)
    manifest = write_corpus(pairs, out)
    n = len(pairs)
    fractions = (1.0, 0.0, 0.0) if n == 0 else ((n - args.n_test) / n, 0.0, args.n_test / n)
    train_pairs, _, test_pairs = split_dataset(pairs, fractions, seed=args.seed)
    rows = {json.loads(x)["study_id"]: x for x in manifest.read_text().splitlines() if x.strip()}
    split_paths = []
    for name, part in (("train", train_pairs), ("test", test_pairs)):
        p = out / f"{name}.jsonl"
        p.write_text("".join(rows[s.study_id] + "\n" for s in part))
        split_paths.append(p)
    vocab_path = out / "vocab.txt"
    build_vocabulary().save(vocab_path)
    spec_record = {k: v for k, v in vars(spec).items() if k != "catalog"}
    spec_path = _write_json(out / "generator.json", spec_record)
    result = {"n_studies": n, "n_train": len(train_pairs), "n_test": len(test_pairs),
              "n_images": sum(len(p.images) for p in pairs)}
    artifacts = [manifest, out / "findings.jsonl", vocab_path, spec_path, *split_paths]
    return _finish(out, "gen-data", result, artifacts, workdir,
                   {"seconds": time.perf_counter() - t0})


def _arm_overrides(arm: str | None) -> dict[str, Any]:
    if arm is None:
        return {}
    a = ARMS[arm]
    base = ExperimentConfig()
    return {"input_mode": a.input_mode, "align_strategy": a.align_strategy,
            "lambda_mim": base.lambda_mim if a.lambda_mim else 0.0,
            "lambda_mrm": base.lambda_mrm if a.lambda_mrm else 0.0}


def cmd_pretrain(args, workdir: Path) -> dict:
    config = _resolve_config(args, workdir, _arm_overrides(args.arm))
    out = workdir / args.out
    ckpt = out / "checkpoints" / "last.pt"
    vocab = _load_vocab(workdir / args.vocab if args.vocab else None)
    pairs = _load_pairs(workdir / args.manifest, config)
    if not pairs:
        raise DataError(f"{args.manifest}: no usable studies")
    try:
        corpus = EncodedCorpus(pairs, vocab, config)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    spe = steps_per_epoch(len(corpus), config.batch_size)
    if args.resume:
        state = load_checkpoint(ckpt, config)
        if state.steps_per_epoch != spe:
            raise DataError(f"checkpoint expects {state.steps_per_epoch} steps per epoch, "
                            f"manifest gives {spe}")
        log.info("resuming at epoch %d, step %d", state.epoch, state.step)
    else:
        state = init_state(config, spe, vocab.pad_id)
        (out / "train_log.jsonl").unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    config_path = save_config(config, out / "config.yaml")
    vocab.save(out / "vocab.txt")
    start_step = state.step
    t0 = time.perf_counter()
    history = train(state, corpus, log_path=out / "train_log.jsonl", checkpoint_dir=ckpt.parent)
    seconds = time.perf_counter() - t0
    if not ckpt.exists():
        save_checkpoint(state, ckpt)
    result = {"config": config.to_dict(), "start_step": start_step, "final_step": state.step,
              "epochs_completed": state.epoch, "final_losses": history[-1] if history else None,
              "counters": dict(state.model.counters), "n_studies": len(corpus)}
    artifacts = [config_path, out / "vocab.txt", out / "train_log.jsonl", ckpt]
    return _finish(out, "pretrain", result, artifacts, workdir, {"train_seconds": seconds})


def _find_vocab(args, workdir: Path, ckpt: Path) -> Vocabulary:
    if args.vocab:
        return _load_vocab(workdir / args.vocab)
    for cand in (ckpt.parent / "vocab.txt", ckpt.parent.parent / "vocab.txt"):
        if cand.exists():
            return Vocabulary.load(cand)
    return build_vocabulary()


def cmd_eval(args, workdir: Path) -> dict:
    ckpt = workdir / args.checkpoint
    state = load_checkpoint(ckpt)
    config = state.config
    vocab = _find_vocab(args, workdir, ckpt)
    pairs = _load_pairs(workdir / args.manifest, config)
    if not pairs:
        raise DataError(f"{args.manifest}: no usable studies")
    try:
        corpus = EncodedCorpus(pairs, vocab, config)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    config_path = save_config(config, out / "config.yaml")
    t0 = time.perf_counter()
    index = embed_corpus(state.model, corpus)
    ks = sorted(set(args.k))
    recall = evaluate_recall(index, ks)
    curves = nlg_curves(index, corpus.reports, k_max=args.nlg_k_max)
    groups = grouped_recall(index, corpus.reports, ks=ks)
    gap = index.gap()
    v, r = index.embeddings()
    export_embeddings([v, r], out / "embeddings.npy")
    artifacts = [config_path, out / "embeddings.npy", out / "embeddings.jsonl",
                 _write_json(out / "recall.json", recall),
                 _write_json(out / "nlg_curves.json", curves),
                 _write_json(out / "grouped_recall.json", groups),
                 _write_json(out / "gap.json", {"modality_gap": gap, "pca": pca_scatter(v, r)})]
    result = {"recall": recall, "modality_gap": gap, "n_reports": len(corpus),
              "n_images": int(len(index.image_owner))}
    if args.query:
        if args.query not in corpus.study_ids:
            raise DataError(f"--query {args.query!r} is not a study in {args.manifest}")
        dumps = {d: topk_dump(index, corpus.reports, args.query, k=args.topk, direction=d)
                 for d in ("i2r", "r2i")}
        artifacts.append(_write_json(out / "topk.json", dumps))
    return _finish(out, "eval", result, artifacts, workdir, {"seconds": time.perf_counter() - t0})


def cmd_benchmark(args, workdir: Path) -> dict:
    config = _resolve_config(args, workdir)
    out = workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    config_path = save_config(config, out / "config.yaml")
    reports = {m: resource_report(config, m, n_probe_steps=args.probe_steps)
               for m in ("masked_only", "dual_input")}
    m, d = reports["masked_only"], reports["dual_input"]
    ratios = {
        "image_tokens": m.image_tokens_per_sample / d.image_tokens_per_sample,
        "text_tokens": m.text_tokens_per_sample / d.text_tokens_per_sample,
        "activation_proxy": m.peak_allocation_proxy / d.peak_allocation_proxy,
    }
    timing = {"wall_seconds_per_step": {k: r.wall_seconds_per_step for k, r in reports.items()},
              "step_time_ratio": m.wall_seconds_per_step / d.wall_seconds_per_step}
    static = {k: {f: v for f, v in r.to_dict().items() if f != "wall_seconds_per_step"}
              for k, r in reports.items()}
    path = _write_json(out / "resources.json",
                       {"reports": {k: r.to_dict() for k, r in reports.items()}, "ratios": ratios,
                        **timing})
    return _finish(out, "benchmark", {"reports": static, "ratios": ratios},
                   [config_path, path], workdir, timing)


def cmd_ablate(args, workdir: Path) -> dict:
    config = _resolve_config(args, workdir)
    out = workdir / args.out
    out.mkdir(parents=True, exist_ok=True)
    config_path = save_config(config, out / "config.yaml")
    vocab = _load_vocab(workdir / args.vocab if args.vocab else None)
    if args.train_manifest and args.test_manifest:
        train_pairs = _load_pairs(workdir / args.train_manifest, config)
        test_pairs = _load_pairs(workdir / args.test_manifest, config)
    elif args.train_manifest or args.test_manifest:
        raise ConfigError("give both --train-manifest and --test-manifest, or neither")
    else:
        train_pairs, test_pairs = default_corpus(args.n_train, args.n_test, seed=args.data_seed,
                                                 image_size=config.image_size)
    rows, timing = [], {}
    for arm in args.arms:
        for seed in args.seeds:
            res = run_arm(arm, config, train_pairs, test_pairs, vocab, seed=seed)
            rows.append({"arm": arm, "components": res["components"], "seed": seed,
                         "input_mode": res["input_mode"], "align_strategy": res["align_strategy"],
                         **res["recall"], "modality_gap": res["gap"]})
            timing[f"{arm}/{seed}"] = res["train_seconds"]
    metrics = [k for k in rows[0] if "_R@" in k] + ["modality_gap"] if rows else []
    table = []
    for arm in args.arms:
        sel = [r for r in rows if r["arm"] == arm]
        table.append({"arm": arm, "components": ARMS[arm].components, "n_seeds": len(sel),
                      **{k: statistics.fmean(r[k] for r in sel) for k in metrics}})
    md = ["| arm | components | " + " | ".join(metrics) + " |",
          "|" + "---|" * (len(metrics) + 2)]
    md += ["| {} | {} | ".format(t["arm"], t["components"])
           + " | ".join(f"{t[k]:.3f}" for k in metrics) + " |" for t in table]
    md_path = out / "ablation.md"
    md_path.write_text("\n".join(md) + "\n")
    json_path = _write_json(out / "ablation.json", {"runs": rows, "table": table})
    return _finish(out, "ablate", {"table": table, "runs": rows},
                   [config_path, md_path, json_path], workdir, {"train_seconds": timing})


# parser -----------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _arm_list(text: str) -> list[str]:
    arms = [x.strip() for x in text.split(",") if x.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise argparse.ArgumentTypeError(f"unknown arms {bad}; choose from {sorted(ARMS)}")
    return arms


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="mcrlab", description=__doc__.splitlines()[0],
                                     formatter_class=fmt)
    parser.add_argument("--workdir", default=".", help="base directory for every relative path")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    spec = SyntheticSpec()
    p = sub.add_parser("gen-data", help="write a synthetic paired corpus", formatter_class=fmt)
    p.add_argument("--out", default="data")
    p.add_argument("--n-studies", type=int, default=spec.n_studies)
    p.add_argument("--n-test", type=int, default=200, help="studies held out into test.jsonl")
    p.add_argument("--image-size", type=int, default=spec.image_size)
    p.add_argument("--channels", type=int, default=spec.channels)
    p.add_argument("--grid", type=int, default=spec.grid)
    p.add_argument("--findings", type=int, nargs=2, default=list(spec.findings_per_study),
                   metavar=("MIN", "MAX"))
    p.add_argument("--views", type=int, nargs=2, default=list(spec.views_per_study),
                   metavar=("MIN", "MAX"))
    p.add_argument("--fillers", type=int, nargs=2, default=list(spec.filler_sentences),
                   metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=float, default=spec.noise)
    p.add_argument("--seed", type=int, default=spec.seed)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train a model on a manifest", formatter_class=fmt)
    p.add_argument("--manifest", default="data/train.jsonl")
    p.add_argument("--out", default="runs/pretrain")
    p.add_argument("--vocab", default=None, help="vocabulary file; default: synthetic vocabulary")
    p.add_argument("--arm", choices=sorted(ARMS), default=None,
                   help="preset input mode, alignment and loss weights of an ablation arm")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoints/last.pt")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="retrieval and report-similarity evaluation", formatter_class=fmt)
    p.add_argument("--checkpoint", default="runs/pretrain/checkpoints/last.pt")
    p.add_argument("--manifest", default="data/test.jsonl")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--vocab", default=None, help="default: vocab.txt beside the run")
    p.add_argument("--k", type=_int_list, default=[1, 5, 10], help="comma-separated K values")
    p.add_argument("--nlg-k-max", type=int, default=10)
    p.add_argument("--query", default=None, help="study id for a top-K qualitative dump")
    p.add_argument("--topk", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="token, memory-proxy and step-time comparison",
                       formatter_class=fmt)
    p.add_argument("--out", default="runs/benchmark")
    p.add_argument("--probe-steps", type=int, default=20)
    _add_config_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate", help="train and score ablation arms a-f", formatter_class=fmt)
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--arms", type=_arm_list, default=sorted(ARMS), help="comma-separated arm letters")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated training seeds")
    p.add_argument("--train-manifest", default=None)
    p.add_argument("--test-manifest", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--n-train", type=int, default=2000, help="synthetic train size without manifests")
    p.add_argument("--n-test", type=int, default=200, help="synthetic test size without manifests")
    p.add_argument("--data-seed", type=int, default=0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    workdir = Path(args.workdir).resolve()
    try:
        summary = args.func(args, workdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    path = next(a for a in summary["artifacts"] if a.endswith("summary.json"))
    print(json.dumps({"command": summary["command"], "exit_code": EXIT_OK, "summary": path}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
