"""Command-line entry point.

Subcommands cover the full workflow: `gen-data` builds a synthetic
dataset, `train` fits one variant over one or more seeds, `eval` scores
a finished run, `compare` assembles the variant comparison tables,
`attn-export` dumps attention heatmaps, and `stats` recounts question
distributions. Exit codes: 0 ok, 1 usage, 2 environment/data problems,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import (VARIANT_TABLE_ORDER, VARIANTS, RunConfig, all_override_keys,
                     apply_override, load_config)
from .datagen import DataError, generate_dataset, load_manifest, write_stats_csv
from .encoders import Vocabulary
from .evaluation import (build_comparison, comparison_csv, comparison_markdown,
                         evaluate_records, export_attention, report_csv,
                         report_markdown, write_report_json)
from .model import init_params, load_model
from .netpbm import read_ppm
from .training import NumericsError, build_vocabulary, score_records, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ENV = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _run_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("LVQA_RUN_DIR", "runs"))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            sys.stderr.write(f"error: --set expects key=value, got '{item}'\n")
            raise SystemExit(EXIT_USAGE)
        key, value = item.split("=", 1)
        apply_override(cfg, key, value)
    cfg.validate()
    return cfg


def _seed_list(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("empty seed list")
    return seeds


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        sys.stderr.write(f"error: output directory not writable: {exc}\n")
        return EXIT_ENV
    manifests = generate_dataset(cfg.data, out)
    total = sum(len(v) for v in manifests.values())
    print(f"wrote {total} records across {len(manifests)} splits to {out}")
    return EXIT_OK


def _train_one_seed(cfg: RunConfig, data_dir: Path, run_dir: Path, seed: int,
                    manifests, feature_store=None, quiet=False) -> None:
    import copy

    model_cfg = copy.deepcopy(cfg.model)
    train_cfg = copy.deepcopy(cfg.train)
    train_cfg.seed = seed
    vocab = build_vocabulary(manifests["train"], model_cfg, data_dir)
    params = init_params(model_cfg, seed=seed, vocab_size=len(vocab))
    log = None if quiet else (lambda msg: print(f"[seed {seed}] {msg}", flush=True))
    train(params, vocab, model_cfg, train_cfg, manifests["train"], manifests["val"],
          data_dir, run_dir=run_dir, feature_store=feature_store, log=log)
    vocab.save(run_dir / "vocab.json")


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.variant:
        cfg.model.variant = args.variant
        cfg.model.validate()
    data_dir = Path(args.data)
    if not (data_dir / "train.jsonl").exists():
        sys.stderr.write(f"error: no train.jsonl under {data_dir}\n")
        return EXIT_ENV
    manifests = {s: load_manifest(data_dir / f"{s}.jsonl") for s in ("train", "val")}
    seeds = _seed_list(args.seeds)
    root = _run_root(args) / args.name
    pending = []
    for seed in seeds:
        run_dir = root / f"seed{seed}"
        if (run_dir / "checkpoint" / "weights.bin").exists() and not args.force:
            sys.stderr.write(f"error: {run_dir} already holds a checkpoint; use --force to retrain\n")
            return EXIT_ENV
        pending.append((seed, run_dir))
    try:
        if args.jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                futures = [pool.submit(_train_one_seed, cfg, data_dir, run_dir, seed,
                                       manifests, None, True)
                           for seed, run_dir in pending]
                for f in futures:
                    f.result()
        else:
            store: dict = {}
            for seed, run_dir in pending:
                _train_one_seed(cfg, data_dir, run_dir, seed, manifests,
                                feature_store=store if cfg.model.freeze_image_encoder else None,
                                quiet=args.quiet)
    except NumericsError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    for seed, run_dir in pending:
        print(f"run complete: {run_dir}")
    return EXIT_OK


def _evaluate_run(run_dir: Path, data_dir: Path, split: str,
                  feature_store=None) -> dict:
    vocab = Vocabulary.load(run_dir / "vocab.json")
    params, model_cfg = load_model(run_dir / "checkpoint", vocab)
    records = load_manifest(data_dir / f"{split}.jsonl")
    probs = score_records(params, vocab, model_cfg, records, data_dir,
                          feature_store=feature_store)
    yes = vocab.answer_to_index["yes"]
    report = evaluate_records(probs[:, yes], records)
    report["split"] = split
    report["variant"] = model_cfg.variant
    return report


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    data_dir = Path(args.data)
    if not (run_dir / "checkpoint" / "weights.bin").exists():
        sys.stderr.write(f"error: no checkpoint under {run_dir}\n")
        return EXIT_ENV
    report = _evaluate_run(run_dir, data_dir, args.split)
    write_report_json(run_dir / "report.json", report)
    (run_dir / "report.md").write_text(report_markdown(report))
    report_csv(run_dir / "report.csv", report)
    print(json.dumps(report["overall"], indent=1, sort_keys=True))
    print(f"report written to {run_dir / 'report.json'} (+ .md, .csv)")
    return EXIT_OK


def cmd_compare(args) -> int:
    data_dir = Path(args.data)
    root = _run_root(args)
    seeds = _seed_list(args.seeds)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            sys.stderr.write(f"error: unknown variant '{v}'\n")
            return EXIT_USAGE
    missing = []
    per_variant: dict[str, list[dict]] = {}
    store: dict = {}
    for variant in variants:
        reports = []
        for seed in seeds:
            run_dir = root / f"{args.prefix}{variant}" / f"seed{seed}"
            if not (run_dir / "checkpoint" / "weights.bin").exists():
                missing.append(str(run_dir))
                continue
            report_path = run_dir / "report.json"
            cached = None
            if report_path.exists() and not args.rescore:
                doc = json.loads(report_path.read_text())
                if doc.get("split") == args.split:
                    cached = doc
            if cached is None:
                cached = _evaluate_run(run_dir, data_dir, args.split, feature_store=store)
                write_report_json(report_path, cached)
            reports.append(cached)
        per_variant[variant] = reports
    if missing:
        sys.stderr.write("error: missing checkpoints:\n" +
                         "\n".join(f"  {m}" for m in missing) + "\n")
        return EXIT_ENV
    for variant, reports in per_variant.items():
        for rep in reports:
            rep.pop("split", None)
            rep.pop("variant", None)
    comparison = build_comparison(per_variant)
    out = root / "comparison"
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "comparison.json", comparison)
    (out / "comparison.md").write_text(comparison_markdown(comparison))
    comparison_csv(out / "comparison.csv", comparison)
    print(comparison_markdown(comparison))
    print(f"tables written to {out}")
    return EXIT_OK


def cmd_attn_export(args) -> int:
    from . import tensor as T
    from .attention import attention_map
    from .encoders import encode_image, encode_question, pad_ids, tokenize
    from .model import build_variant_input
    from .netpbm import read_pgm

    run_dir = Path(args.run_dir)
    data_dir = Path(args.data)
    if not (run_dir / "checkpoint" / "weights.bin").exists():
        sys.stderr.write(f"error: no checkpoint under {run_dir}\n")
        return EXIT_ENV
    vocab = Vocabulary.load(run_dir / "vocab.json")
    params, model_cfg = load_model(run_dir / "checkpoint", vocab)
    records = load_manifest(data_dir / f"{args.split}.jsonl")[:args.n]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        image = read_ppm(data_dir / rec["image"]).astype(model_cfg.dtype) / 255.0
        mask = (read_pgm(data_dir / rec["mask"]) > 127).astype(np.uint8)
        img_v, q_v, _ = build_variant_input(model_cfg.variant, image, rec["question"],
                                            mask, model_cfg.grid_n)
        ids = np.asarray([pad_ids(tokenize(q_v, vocab), model_cfg.max_question_len)])
        with T.no_grad():
            feats = encode_image(img_v[None], params, model_cfg)
            qvec = encode_question(ids, params, model_cfg)
            weights = attention_map(feats, qvec, params, model_cfg).data[0]
        export_attention(weights, image, mask, out / f"rec{i:03d}")
    print(f"exported attention maps for {len(records)} records to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    data_dir = Path(args.data)
    manifests = {}
    for split in ("train", "val", "test"):
        path = data_dir / f"{split}.jsonl"
        if path.exists():
            manifests[split] = load_manifest(path)
    if not manifests:
        sys.stderr.write(f"error: no manifests under {data_dir}\n")
        return EXIT_ENV
    out = data_dir / "stats.csv"
    write_stats_csv(out, manifests)
    print(out.read_text())
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> _Parser:
    epilog = ("config keys honored by --set:\n  " +
              "\n  ".join(all_override_keys()))
    parser = _Parser(prog="lvqa", description=__doc__,
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="dataset seed (overrides config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant over one or more seeds")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", choices=VARIANTS, help="input variant to train")
    p.add_argument("--seeds", default="0", help="comma list or ranges, e.g. 0,1,2 or 0-4")
    p.add_argument("--name", default="run", help="run family name under the output root")
    p.add_argument("--out", help="output root (default $LVQA_RUN_DIR or ./runs)")
    p.add_argument("--jobs", type=int, default=1, help="train seeds in parallel processes")
    p.add_argument("--force", action="store_true", help="overwrite existing runs")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch logging")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on a split")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="aggregate seed runs into comparison tables")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run root holding the per-variant run families")
    p.add_argument("--variants", default=",".join(VARIANT_TABLE_ORDER))
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--prefix", default="", help="run family prefix, families are <prefix><variant>")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--rescore", action="store_true", help="recompute per-run reports")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("attn-export", help="export attention heatmaps and overlays")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, default=8, help="number of records to export")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_export)

    p = sub.add_parser("stats", help="recount per-class question stats into stats.csv")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:          # argparse errors and --help
        return int(exc.code or 0)
    except (DataError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ENV
    except NumericsError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except KeyError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
