"""Command-line entry points: ``msp-reid {augment,train,eval,probe}``.

Every subcommand takes ``--config``, ``--seed``, ``--out`` and repeatable
``--set key=value`` overrides.  Failures exit nonzero and print a one-line
JSON error object on stderr.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ablation_overrides, config_from_dict, dump_config, load_config
from .data import Dataset, write_directory_dataset, write_png
from .errors import CheckpointError, MSPError
from .evaluation import attention_maps, extract_embeddings, hairstyle_probe
from .structures import View

log = logging.getLogger("msp_reid")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _config(args):
    overrides = []
    if getattr(args, "preset", None):
        overrides += ablation_overrides(args.preset)
    overrides += list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def cmd_augment(args) -> int:
    from .train import augment_dataset, load_dataset

    cfg = _config(args)
    out = Path(args.out)
    dataset = load_dataset(cfg)
    originals = [s for s in dataset if s.view is not View.HSOA_AUG]
    splits = tuple(args.splits.split(","))
    augmented, report = augment_dataset(Dataset(originals), cfg, splits=splits)

    root = write_directory_dataset(originals + augmented, out / "dataset")
    lines = []
    for s in augmented:
        lines.append(json.dumps({
            "source_id": s.source_id,
            "style": s.hairstyle.value,
            "output_path": f"dataset/images/{s.sample_id}.png",
            "labels": {"identity": s.identity, "clothes": s.clothes, "camera": s.camera, "split": s.split},
        }, sort_keys=True))
    (out / "augment_manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    (out / "reports").mkdir(parents=True, exist_ok=True)
    summary = {
        "originals": len(originals),
        "augmented": len(augmented),
        "rows": len(originals) + len(augmented),
        "skipped_missing_mask": report["skipped_missing_mask"],
        "skipped_empty_hair": report["empty_hair"],
        "synthesis_failures": len(report["failures"]),
        "dataset": str(root),
    }
    (out / "reports" / "augment.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    result = train(cfg, out, resume=not args.no_resume)
    summary = {name: rep.to_json() for name, rep in result.final_reports.items()}
    summary["steps"] = result.steps
    summary["best_cloth_changing_mAP"] = result.best_metric
    _emit(summary)
    return 0


# ---------------------------------------------------------------------------
# eval / probe share checkpoint loading
# ---------------------------------------------------------------------------

def _load_model(args, out: Path):
    from .train import load_checkpoint, model_from_checkpoint

    path = Path(args.checkpoint) if args.checkpoint else out / "checkpoints" / "best.pt"
    ckpt = load_checkpoint(path)
    if args.config is None:
        # No config file given: start from the one stored in the checkpoint.
        data = ckpt.get("config")
        if data is None:
            raise CheckpointError(f"{path} holds no config; pass --config")
        from .config import apply_overrides

        extra = list(args.set or []) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = config_from_dict(apply_overrides(data, extra))
    else:
        cfg = _config(args)
    return cfg, model_from_checkpoint(ckpt, cfg), path


def _eval_split(cfg):
    from .train import load_dataset

    dataset = load_dataset(cfg)
    return dataset.subset("query"), dataset.subset("gallery")


def cmd_eval(args) -> int:
    from .train import evaluate, load_dataset

    out = Path(args.out)
    cfg, model, path = _load_model(args, out)
    if args.single_shot_trials is not None:
        cfg.eval.single_shot_trials = args.single_shot_trials
    dataset = load_dataset(cfg)
    reports = evaluate(model, dataset, cfg)
    payload = {name: rep.to_json() for name, rep in reports.items()}
    payload["checkpoint"] = str(path)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    query, gallery = dataset.subset("query"), dataset.subset("gallery")
    if args.dump_attention:
        adir = out / "dumps" / "attention"
        adir.mkdir(parents=True, exist_ok=True)
        maps = attention_maps(model, np.stack([s.image for s in query]))
        for s, a in zip(query, maps):
            # Upsample by nearest neighbour to image size and scale to 0..255.
            h, w = s.image.shape[:2]
            up = np.kron(a, np.ones((h // a.shape[0], w // a.shape[1])))
            peak = up.max()
            gray = np.round(255.0 * up / peak) if peak > 0 else np.zeros_like(up)
            write_png(adir / f"{s.sample_id}.png", gray.astype(np.uint8))
    if args.dump_retrieval:
        qe = extract_embeddings(model, query.samples, cfg.eval.batch_size, cfg.eval.feature)
        ge = extract_embeddings(model, gallery.samples, cfg.eval.batch_size, cfg.eval.feature)
        order = np.argsort(-(qe @ ge.T), axis=1, kind="stable")[:, :10]
        (out / "dumps").mkdir(parents=True, exist_ok=True)
        with (out / "dumps" / "top10.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query", "rank", "gallery", "same_identity", "same_clothes"])
            for qs, row in zip(query, order):
                for rank, gi in enumerate(row, 1):
                    gs = gallery[int(gi)]
                    writer.writerow([qs.sample_id, rank, gs.sample_id,
                                     int(gs.identity == qs.identity), int(gs.clothes == qs.clothes)])
    _emit(payload)
    return 0


def cmd_probe(args) -> int:
    out = Path(args.out)
    cfg, model, path = _load_model(args, out)
    query, gallery = _eval_split(cfg)
    samples = list(query) + list(gallery)
    emb = extract_embeddings(model, samples, cfg.eval.batch_size, cfg.eval.feature)
    if args.target == "hairstyle":
        labels = np.array([s.hairstyle.value for s in samples])
    else:
        labels = np.array([s.clothes for s in samples])
    if args.shuffle_labels:
        labels = np.random.default_rng(cfg.seed).permutation(labels)
    acc = hairstyle_probe(emb, labels, split_seed=cfg.seed)
    chance = float(np.unique(labels, return_counts=True)[1].max() / len(labels))
    payload = {"target": args.target, "accuracy": acc, "majority_baseline": chance,
               "shuffled": bool(args.shuffle_labels), "num_samples": len(samples), "checkpoint": str(path)}
    (out / "reports").mkdir(parents=True, exist_ok=True)
    suffix = "_shuffled" if args.shuffle_labels else ""
    (out / "reports" / f"probe_{args.target}{suffix}.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _emit(payload)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msp-reid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        return p

    p = common(sub.add_parser("augment", help="materialize hairstyle-augmented views"))
    p.add_argument("--splits", default="train", help="comma-separated splits to augment")
    p.set_defaults(func=cmd_augment)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--preset", help="ablation preset: baseline, hsoa, cpre, rpa, ..., msp")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing last checkpoint")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="retrieval evaluation of a checkpoint"))
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoints/best.pt")
    p.add_argument("--dump-attention", action="store_true", help="one grayscale PNG per query")
    p.add_argument("--dump-retrieval", action="store_true", help="top-10 gallery list per query as CSV")
    p.add_argument("--single-shot-trials", type=int)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("probe", help="linear probe of a nuisance label"))
    p.add_argument("--checkpoint", help="defaults to <out>/checkpoints/best.pt")
    p.add_argument("--target", choices=["hairstyle", "clothes"], default="hairstyle")
    p.add_argument("--shuffle-labels", action="store_true", help="null control with permuted labels")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except MSPError as exc:
        print(json.dumps({"error": exc.code, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE if exc.code == "configuration_error" else EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": "runtime_error", "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
