"""``cortex`` command line: dataset-gen, extract-rte, train, ablate, eval, caption, direct-vlm.

Training options resolve as flags > ``--config`` file > built-in defaults.
Exit status is 0 on success, 1 on runtime failure and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence


from . import __version__
from .errors import ConfigurationError, CortexError
from .evaluation import format_report, report_json
from .plotting import plot_ablation, plot_lambda_sweep, plot_loss_curves, plot_report
from .rte import DEFAULT_CAP, PROMPTS, ResponseCache, build_prompt, direct_pair_caption, extract_scene, make_client, run_extraction
from .toy_scene import CHANGE_KINDS, generate_dataset, load_dataset, load_image, save_dataset, split_dataset
from .training import (
    TrainConfig,
    TrainResult,
    ablate,
    caption_pairs,
    evaluate_model,
    load_checkpoint,
    load_config,
    sweep_lambdas,
    train,
)

log = logging.getLogger("cortex")

DATASET_FILE = "dataset.jsonl"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def on_off(value: str) -> bool:
    v = value.lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def float_list(value: str) -> list[float]:
    try:
        return [float(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def int_list(value: str) -> list[int]:
    try:
        return [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def change_mix(value: str) -> dict[str, float]:
    out = {}
    for part in value.split(","):
        kind, _, weight = part.partition("=")
        if kind.strip() not in CHANGE_KINDS or not weight:
            raise argparse.ArgumentTypeError(f"bad mix entry {part!r}; use kind=weight with kind in {CHANGE_KINDS}")
        out[kind.strip()] = float(weight)
    return out


# (flag, TrainConfig field, type, help)
TRAIN_FLAGS = [
    ("--lambda", "lam", float, "weight of the alignment loss (default 1e-4)"),
    ("--lr", "lr", float, "Adam learning rate (default 1e-4)"),
    ("--batch-size", "batch_size", int, "pairs per step (default 8)"),
    ("--max-iters", "max_iters", int, "optimizer steps (default 1000)"),
    ("--seed", "seed", int, "seed for initialization and batch order (default 0)"),
    ("--use-rte", "use_rte", on_off, "use reasoning text (on|off)"),
    ("--use-itda", "use_itda", on_off, "use the alignment module (on|off); needs --use-rte on"),
    ("--use-l-sa", "use_l_sa", on_off, "include the static alignment loss (on|off)"),
    ("--use-l-da", "use_l_da", on_off, "include the dynamic alignment loss (on|off)"),
    ("--use-rte-memory", "use_rte_memory", on_off, "feed sentence features to the decoder directly (on|off)"),
    ("--lambda-sweep", "lambda_sweep", float_list, "comma-separated lambdas; trains one run per value"),
    ("--channels", "c", int, "feature width c (default 64)"),
    ("--heads", "heads", int, "attention heads (default 8)"),
    ("--layers", "layers", int, "decoder layers (default 2)"),
    ("--dropout", "dropout", float, "decoder dropout (default 0.1)"),
    ("--max-len", "max_len", int, "maximum caption length (default 20)"),
    ("--resolution", "resolution", int, "render resolution in pixels (default 40)"),
    ("--grad-clip", "grad_clip", float, "global gradient norm clip, 0 disables (default 5.0)"),
    ("--val-every", "val_every", int, "validation interval in steps (default 100)"),
    ("--encoder-seed", "encoder_seed", int, "seed of the hashed sentence encoder (default 0)"),
    ("--cap", "cap", int, "sentences kept per scene (default 15)"),
    ("--dataset", "dataset", str, "dataset directory or jsonl file; generated when omitted"),
    ("--rte", "rte_path", str, "RTE jsonl from extract-rte; rendered from scene specs when omitted"),
    ("--n-pairs", "n_pairs", int, "pairs to generate when no dataset is given (default 512)"),
    ("--data-seed", "data_seed", int, "seed of the generated dataset (default 0)"),
]


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--out", required=True, help="output directory")
    g = p.add_argument_group("training options (override --config)")
    for flag, dest, typ, help_ in TRAIN_FLAGS:
        g.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=help_)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    try:
        cfg = load_config(args.config) if args.config else TrainConfig()
        overrides = {dest: getattr(args, dest) for _, dest, _, _ in TRAIN_FLAGS if hasattr(args, dest)}
        # checkpoints record data locations, so keep them valid from any working directory
        for key in ("dataset", "rte_path"):
            if overrides.get(key):
                overrides[key] = str(Path(overrides[key]).resolve())
        return TrainConfig.from_mapping(overrides, cfg)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# shared helpers


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, argv: Sequence[str], config_digest: str | None = None,
                   name: str = "manifest.json", files: Sequence[Path] | None = None) -> Path:
    """Record the command, config digest and a content hash for each artifact."""
    out_dir = Path(out_dir)
    path = out_dir / name
    if files is None:
        files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p != path)
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config_digest": config_digest,
        "artifacts": {str(Path(f).relative_to(out_dir)): git_blob_hash(Path(f).read_bytes()) for f in files},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def dataset_file(path: str | Path) -> Path:
    path = Path(path)
    return path / DATASET_FILE if path.is_dir() else path


def load_pairs(cfg: TrainConfig) -> list:
    if cfg.dataset:
        return load_dataset(dataset_file(cfg.dataset))
    return generate_dataset(cfg.n_pairs, seed=cfg.data_seed)


def rte_index_for(cfg: TrainConfig):
    if not cfg.rte_path:
        return None
    from .rte import load_rte_index

    return load_rte_index(cfg.rte_path, cfg.cap)


def require_split(splits: dict, name: str) -> list:
    if not splits.get(name):
        from .errors import InputError

        raise InputError(f"split {name!r} is missing or empty (available: "
                         f"{sorted(k for k, v in splits.items() if v)})")
    return splits[name]


def write_eval_outputs(out_dir: Path, report, captions: dict[str, str], pairs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    data.pop("captions", None)
    (out_dir / "report.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(format_report(report) + "\n")
    lines = ["pair_id\tcaption\treference\n"]
    lines += [f"{p.pair_id}\t{captions[p.pair_id]}\t{p.gt_captions[0]}\n" for p in pairs]
    (out_dir / "captions.tsv").write_text("".join(lines))
    plot_report(data, out_dir / "report.png")


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_gen(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = generate_dataset(args.n, seed=args.seed, change_mix=args.mix, grid_size=args.grid_size,
                             min_objects=args.min_objects, max_objects=args.max_objects)
    save_dataset(pairs, out / DATASET_FILE, out / "images", args.resolution)
    splits = {k: [p.pair_id for p in v] for k, v in split_dataset(pairs).items()}
    (out / "splits.json").write_text(json.dumps(splits, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "dataset-gen", argv)
    print(f"wrote {len(pairs)} pairs to {out / DATASET_FILE}")
    return 0


def cmd_extract_rte(args, argv) -> int:
    pairs = load_dataset(dataset_file(args.dataset))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    client = make_client(args.endpoint, model=args.model) if args.model else make_client(args.endpoint)
    cache_dir = Path(args.cache_dir) if args.cache_dir else out.parent / "vlm_cache"
    summary = run_extraction(pairs, client, args.mode, out_path=out, cap=args.cap, cache=ResponseCache(cache_dir),
                             resolution=args.resolution, workers=args.workers)
    report = {"records_written": summary.n_records, "records_skipped": summary.n_skipped,
              "network_calls": summary.network_calls, "mean_sentences": summary.mean_sentences,
              "max_sentences": summary.max_sentences, "failures": summary.failures}
    print(json.dumps(report, indent=2))
    write_manifest(out.parent, "extract-rte", argv, name=out.name + ".manifest.json", files=[out])
    return 0 if summary.ok else 1


def _train_and_report(cfg: TrainConfig, splits: dict, rte_index, out: Path) -> TrainResult:
    result = train(splits["train"], cfg, splits.get("val", ()), out_dir=out, rte_index=rte_index)
    plot_loss_curves(result.log, out / "loss_curves.png")
    test = splits.get("test") or splits.get("val")
    if test:
        report = evaluate_model(result, test, rte_index=rte_index, split="test", config_digest=cfg.digest())
        write_eval_outputs(out / "eval_test", report, report.meta["captions"], test)
    return result


def cmd_train(args, argv) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    splits = split_dataset(load_pairs(cfg))
    require_split(splits, "train")
    rte_index = rte_index_for(cfg)
    if not cfg.lambda_sweep:
        result = _train_and_report(cfg, splits, rte_index, out)
        print(f"trained {result.iteration} iterations; final l_cap {result.final_l_cap:.4f}; checkpoint in {out}")
        write_manifest(out, "train", argv, cfg.digest())
        return 0

    test = require_split(splits, "test")
    base = cfg.replace(use_rte=False, use_itda=False, lambda_sweep=())
    baseline = train(splits["train"], base, splits.get("val", ()), out_dir=out / "baseline", rte_index=rte_index)
    base_report = evaluate_model(baseline, test, rte_index=rte_index, row="baseline")
    write_eval_outputs(out / "baseline", base_report, base_report.meta["captions"], test)
    reports = sweep_lambdas(splits["train"], cfg, test, cfg.lambda_sweep, val_pairs=splits.get("val", ()),
                            out_dir=out, rte_index=rte_index)
    rows = ["lambda\tbleu4\trouge_l\tcider\tbeats_baseline_cider\n",
            f"baseline\t{base_report.bleu4}\t{base_report.rouge_l}\t{base_report.cider}\t\n"]
    for lam, rep in reports.items():
        rows.append(f"{lam:g}\t{rep.bleu4}\t{rep.rouge_l}\t{rep.cider}\t{rep.cider > base_report.cider}\n")
        write_eval_outputs(out / f"lambda_{lam:g}", rep, rep.meta["captions"], test)
    (out / "sweep.tsv").write_text("".join(rows))
    plot_lambda_sweep({lam: r.cider for lam, r in reports.items()}, out / "lambda_sweep.png", base_report.cider)
    print("".join(rows), end="")
    write_manifest(out, "train", argv, cfg.digest())
    return 0


def cmd_ablate(args, argv) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    splits = split_dataset(load_pairs(cfg))
    require_split(splits, "train")
    test = require_split(splits, "test")
    report = ablate(splits["train"], cfg, test, args.seeds, val_pairs=splits.get("val", ()),
                    rte_index=rte_index_for(cfg))
    (out / "ablation.tsv").write_text(report.to_tsv())
    summary = {table: {row: {m: report.mean(table, row, m) for m in ("bleu4", "rouge_l", "cider")}
                       for row in getattr(report, table)} for table in ("modules", "losses")}
    (out / "ablation.json").write_text(json.dumps({"seeds": list(args.seeds), "mean": summary,
                                                    "runs": report.rows()}, indent=2, sort_keys=True) + "\n")
    plot_ablation(report.rows(), out / "ablation.png")
    for table, rows in summary.items():
        print(f"[{table}]")
        for row, vals in rows.items():
            print(f"{row}\t" + "\t".join(f"{k}={v * 100:.1f}" for k, v in vals.items()))
    write_manifest(out, "ablate", argv, cfg.digest())
    return 0


def cmd_eval(args, argv) -> int:
    result = load_checkpoint(args.checkpoint)
    cfg = result.config
    if args.dataset:
        cfg = cfg.replace(dataset=args.dataset)
    if args.rte:
        cfg = cfg.replace(rte_path=args.rte)
    splits = split_dataset(load_pairs(cfg))
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    pairs = require_split(splits, args.split)
    rte_index = rte_index_for(cfg)
    hyps = caption_pairs(result.model, result.vocab, cfg, pairs, rte_index=rte_index, strategy=args.strategy,
                         k=args.beam_k)
    from .evaluation import build_report, records_from_captions

    report = build_report(records_from_captions(pairs, hyps), split=args.split, checkpoint=str(args.checkpoint),
                          strategy=args.strategy)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"eval_{args.split}"
    write_eval_outputs(out, report, {p.pair_id: h for p, h in zip(pairs, hyps)}, pairs)
    print(format_report(report))
    print(report_json(report))
    write_manifest(out, "eval", argv, cfg.digest())
    return 0


def cmd_caption(args, argv) -> int:
    from .model import captions_from_ids, tensors_from_images

    result = load_checkpoint(args.checkpoint)
    cfg = result.config
    before, after = load_image(args.before), load_image(args.after)
    sents = (None, None)
    if cfg.use_rte:
        client = make_client(args.endpoint)
        prompt = build_prompt("compositional")
        sents = tuple(extract_scene(img, prompt, client, scene=scene, cap=cfg.cap).sentences
                      for img, scene in ((before, "before"), (after, "after")))
    dtype = next(result.model.parameters()).dtype
    batch = tensors_from_images(before, after, *sents, cfg.encoder_spec(), dtype)
    ids = result.model.caption(batch, args.strategy, args.beam_k)
    print(captions_from_ids(ids, result.vocab)[0])
    return 0


def cmd_direct_vlm(args, argv) -> int:
    client = make_client(args.endpoint, model=args.model) if args.model else make_client(args.endpoint)
    out = direct_pair_caption(load_image(args.before), load_image(args.after), client)
    print(out.text)
    if out.protocol_violation:
        print("warning: protocol violation (reply is not a single sentence)", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cortex", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cortex {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("dataset-gen", help="generate a toy scene-pair dataset with rendered images")
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resolution", type=int, default=40)
    p.add_argument("--grid-size", type=int, default=5)
    p.add_argument("--min-objects", type=int, default=3)
    p.add_argument("--max-objects", type=int, default=6)
    p.add_argument("--mix", type=change_mix, default=None, help="change frequencies, e.g. add=0.5,remove=0.5")
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("extract-rte", help="extract per-scene reasoning sentences with a VLM")
    p.add_argument("--dataset", required=True, help="dataset directory or jsonl file")
    p.add_argument("--mode", choices=sorted(m for m in PROMPTS if m != "direct_pair"), default="compositional")
    p.add_argument("--endpoint", required=True, help="VLM base URL, or mock:// for the built-in toy reader")
    p.add_argument("--model", default=None, help="model id sent to the endpoint")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="sentences kept per scene (15/13/16)")
    p.add_argument("--out", required=True, help="output jsonl (appended; existing records are skipped)")
    p.add_argument("--cache-dir", default=None, help="reply cache (default: vlm_cache next to --out)")
    p.add_argument("--workers", type=int, default=4, help="parallel in-flight requests")
    p.add_argument("--resolution", type=int, default=40)
    p.set_defaults(func=cmd_extract_rte)

    p = sub.add_parser("train", help="train a model (or a lambda sweep) and evaluate it on the test split")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="module and loss ablation grids over several seeds")
    add_train_flags(p)
    p.add_argument("--seeds", type=int_list, default=[0, 1, 2], help="comma-separated seeds (default 0,1,2)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="caption a split with a checkpoint and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dataset", default=None, help="override the dataset recorded in the checkpoint")
    p.add_argument("--rte", default=None, help="override the RTE file recorded in the checkpoint")
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-k", type=int, default=3)
    p.add_argument("--out", default=None, help="report directory (default: <checkpoint>/eval_<split>)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="caption one before/after image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--endpoint", default="mock://", help="VLM used for the reasoning sentences")
    p.add_argument("--strategy", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-k", type=int, default=3)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("direct-vlm", help="ask the VLM for a change caption directly from both images")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--endpoint", default="mock://")
    p.add_argument("--model", default=None)
    p.set_defaults(func=cmd_direct_vlm)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for bad usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cortex: error: {exc}", file=sys.stderr)
        return 2
    except (CortexError, OSError, ValueError) as exc:
        print(f"cortex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
