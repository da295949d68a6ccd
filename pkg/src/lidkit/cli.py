"""Command-line entry point.

Subcommands: gen-data, train, eval, embed, grad-check, report-diff.
Every run writes a resolved_config.json next to its outputs so the exact
run (config plus seed) can be reproduced. Exit codes: 0 success, 1 bad
usage or validation failure, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__, config as cfgmod, data, figures, gradcheck, trainer
from .core import CheckpointError, NumericError, ValidationError
from .evaluation import (
    classification_report,
    confusion_diff,
    corpus_outputs,
    embedding_stats,
    export_embeddings,
    knn_eval,
    pair_similarity_histogram,
    row_normalize,
)

log = logging.getLogger("lidkit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidkit", description=__doc__)
    p.add_argument("--version", action="version", version=f"lidkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    gen_sub = gen.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    song = gen_sub.add_parser("song", parents=[common], help="template-filled music requests")
    song.add_argument("--n-per-lang", type=int, default=1000)
    song.add_argument("--templates", help="template JSON (default: bundled sample)")
    song.add_argument("--entity-pool", help="entity pool JSON (default: bundled sample)")
    song.add_argument("--out", default="song_corpus.jsonl")
    conf = gen_sub.add_parser("confusable", parents=[common], help="synthetic confusable languages")
    conf.add_argument("--k", type=int, default=5)
    conf.add_argument("--overlap", type=float, default=0.7)
    conf.add_argument("--n-per-lang", type=int, default=2000)
    conf.add_argument("--out", default="confusable_corpus.jsonl")

    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--corpus", help="training corpus JSONL (overrides config paths.corpus)")
    tr.add_argument("--out-dir", help="output directory (overrides config paths.out_dir)")
    tr.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="named objective weighting")
    tr.add_argument("--threads", type=int, default=1)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint, write report + figures")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", help="eval corpus JSONL (overrides config paths.corpus)")
    ev.add_argument("--out-dir", help="output directory (overrides config paths.out_dir)")
    ev.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    em = sub.add_parser("embed", parents=[common], help="export projection embeddings to CSV")
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--corpus", help="corpus JSONL (overrides config paths.corpus)")
    em.add_argument("--out", default="embeddings.csv")

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    gc.add_argument("--trials", type=int, default=20)

    rd = sub.add_parser("report-diff", parents=[common], help="difference of two eval confusion matrices")
    rd.add_argument("--a", required=True, help="eval output dir (or confusion.csv) of model A")
    rd.add_argument("--b", required=True, help="eval output dir (or confusion.csv) of model B")
    rd.add_argument("--out-dir", default="report_diff")
    rd.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
        handler = {
            "gen-data": _cmd_gen_data,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "embed": _cmd_embed,
            "grad-check": _cmd_grad_check,
            "report-diff": _cmd_report_diff,
        }[args.command]
        return handler(args, cfg)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _load_config(args) -> cfgmod.RunConfig:
    if getattr(args, "config", None):
        cfg = cfgmod.load_run_config(args.config)
    else:
        cfg = cfgmod.RunConfig()
    if getattr(args, "seed", None) is not None:
        payload = json.loads(cfg.hp.to_json())
        payload["seed"] = args.seed
        cfg.hp = cfgmod.Hyperparams.from_dict(payload)
    return cfg


def _write_resolved_config(cfg, args, target: str) -> str:
    """Persist the fully resolved run description next to the outputs."""
    blob = json.dumps(
        {
            "command": args.command,
            "argv_overrides": {
                k: v
                for k, v in vars(args).items()
                if k not in ("command", "config") and v is not None
            },
            "config": json.loads(cfg.to_json()),
            "lidkit_version": __version__,
        },
        sort_keys=True,
        indent=2,
    )
    if os.path.isdir(target) or target.endswith(os.sep):
        path = os.path.join(target, "resolved_config.json")
    else:
        root, _ = os.path.splitext(target)
        path = root + ".resolved_config.json"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(blob + "\n")
    return blob


def _cmd_gen_data(args, cfg) -> int:
    seed = cfg.hp.seed
    if args.kind == "song":
        tpl_path = args.templates or cfg.paths.get("templates")
        pool_path = args.entity_pool or cfg.paths.get("entity_pool")
        templates = data.load_templates(tpl_path) if tpl_path else data.bundled_templates()
        pool = data.load_entity_pool(pool_path) if pool_path else data.bundled_entity_pool()
        corpus = data.generate_song_corpus(templates, pool, args.n_per_lang, seed)
        header = {"kind": "song", "seed": seed, "n_per_lang": args.n_per_lang}
    else:
        corpus = data.generate_confusable_corpus(args.k, args.overlap, args.n_per_lang, seed)
        header = {
            "kind": "confusable",
            "seed": seed,
            "k": args.k,
            "overlap": args.overlap,
            "n_per_lang": args.n_per_lang,
        }
    data.save_jsonl(corpus, args.out, header=header)
    _write_resolved_config(cfg, args, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return 0


def _cmd_train(args, cfg) -> int:
    corpus_path = args.corpus or cfg.paths.get("corpus")
    if not corpus_path:
        raise ValidationError("train needs a corpus: pass --corpus or set paths.corpus in the config")
    out_dir = args.out_dir or cfg.paths.get("out_dir") or "train_out"
    hp = cfgmod.apply_preset(cfg.hp, args.preset) if args.preset else cfg.hp
    corpus = data.load_jsonl(corpus_path, cfg.label_space)

    pool = None
    if cfg.aug_cfg.enable_entity_replacement:
        pool_path = cfg.paths.get("entity_pool")
        pool = data.load_entity_pool(pool_path) if pool_path else data.bundled_entity_pool()

    os.makedirs(out_dir, exist_ok=True)
    cfg.hp = hp
    _write_resolved_config(cfg, args, out_dir + os.sep)
    result = trainer.train(
        corpus, hp, cfg.margins, cfg.aug_cfg, out_dir,
        feat_cfg=cfg.feat_cfg, model_cfg=cfg.model_cfg, pool=pool, threads=args.threads,
    )
    figures.training_curves(result.log.records, os.path.join(out_dir, "loss_curves.png"))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"train log:  {os.path.join(out_dir, 'train_log.csv')}")
    return 0


def _cmd_eval(args, cfg) -> int:
    corpus_path = args.corpus or cfg.paths.get("corpus")
    if not corpus_path:
        raise ValidationError("eval needs a corpus: pass --corpus or set paths.corpus in the config")
    out_dir = args.out_dir or cfg.paths.get("out_dir") or "eval_out"
    os.makedirs(out_dir, exist_ok=True)

    bundle = trainer.load_checkpoint(args.checkpoint)
    corpus = data.load_jsonl(corpus_path, bundle.label_space)
    ind_logits, lid_logits, z = corpus_outputs(bundle.params, corpus, bundle.feat_cfg)
    labels = corpus.label_indices()
    flags = corpus.in_domain_flags()

    report = classification_report(ind_logits, lid_logits, labels, flags)
    payload = report.to_dict()

    z_in = z[flags]
    y_in = labels[flags]
    n_classes_present = len(np.unique(y_in)) if len(y_in) else 0
    if len(y_in) > cfg.eval_cfg.knn_k:
        top1, top5 = knn_eval(z_in, y_in, k=cfg.eval_cfg.knn_k)
        payload["knn"] = {"k": cfg.eval_cfg.knn_k, "top1": top1, "top5": top5}
    else:
        payload["knn"] = None
    if n_classes_present >= 2:
        payload["embedding_stats"] = embedding_stats(z_in, y_in).to_dict()
    else:
        payload["embedding_stats"] = None
    hist = None
    if len(y_in) >= 2:
        hist = pair_similarity_histogram(
            z_in, y_in, cfg.eval_cfg.max_pairs_per_side, seed=cfg.hp.seed, bins=cfg.eval_cfg.histogram_bins
        )
        payload["pair_similarity"] = {
            "n_pos": hist.n_pos,
            "n_neg": hist.n_neg,
            "pos_mean": hist.pos_mean,
            "neg_mean": hist.neg_mean,
            "mean_gap": hist.mean_gap,
        }
    else:
        payload["pair_similarity"] = None

    resolved = _write_resolved_config(cfg, args, out_dir + os.sep)
    provenance = {
        "checkpoint": args.checkpoint,
        "checkpoint_sha256": _file_sha256(args.checkpoint),
        "config_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
        "corpus": corpus_path,
    }
    payload["provenance"] = provenance
    stamp = {k: provenance[k] for k in ("checkpoint_sha256", "config_sha256")}

    class_names = list(bundle.label_space.in_domain)
    _write_confusion_csv(os.path.join(out_dir, "confusion.csv"), report.confusion, class_names, provenance=stamp)
    _write_confusion_csv(
        os.path.join(out_dir, "confusion_normalized.csv"),
        row_normalize(report.confusion),
        class_names,
        fmt="{:.6f}",
        provenance=stamp,
    )
    if hist is not None:
        _write_histogram_csv(os.path.join(out_dir, "pair_similarity.csv"), hist, provenance=stamp)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if not args.no_figures:
        figures.confusion_heatmap(report.confusion, class_names, os.path.join(out_dir, "confusion.png"))
        if hist is not None:
            figures.pair_histogram_figure(hist, os.path.join(out_dir, "pair_similarity.png"))

    print(json.dumps({k: payload[k] for k in ("in_acc", "macro_f1", "top1", "top5", "knn", "embedding_stats")}, indent=2))
    print(f"report written to {out_dir}")
    return 0


def _cmd_embed(args, cfg) -> int:
    corpus_path = args.corpus or cfg.paths.get("corpus")
    if not corpus_path:
        raise ValidationError("embed needs a corpus: pass --corpus or set paths.corpus in the config")
    bundle = trainer.load_checkpoint(args.checkpoint)
    corpus = data.load_jsonl(corpus_path, bundle.label_space)
    export_embeddings(bundle.params, corpus, bundle.feat_cfg, args.out)
    _write_resolved_config(cfg, args, args.out)
    print(f"wrote {len(corpus)} embeddings to {args.out}")
    return 0


def _cmd_grad_check(args, cfg) -> int:
    result = gradcheck.run_grad_check(trials=args.trials, seed=cfg.hp.seed or 1)
    print(
        f"grad-check: {result.trials} trials, max relative error {result.max_rel_err:.3e} "
        f"(worst tensor: {result.worst_tensor})"
    )
    if result.passed:
        print("PASS (< 1e-4)")
        return 0
    print("FAIL (>= 1e-4)")
    return 2


def _cmd_report_diff(args, cfg) -> int:
    mat_a, names_a = _read_confusion_csv(_confusion_path(args.a))
    mat_b, names_b = _read_confusion_csv(_confusion_path(args.b))
    if names_a != names_b:
        raise ValidationError(f"class names differ between reports: {names_a} vs {names_b}")
    diff = confusion_diff(row_normalize(mat_a), row_normalize(mat_b))
    os.makedirs(args.out_dir, exist_ok=True)
    resolved = _write_resolved_config(cfg, args, args.out_dir + os.sep)
    stamp = {
        "config_sha256": hashlib.sha256(resolved.encode()).hexdigest(),
        "a": args.a,
        "b": args.b,
    }
    _write_confusion_csv(
        os.path.join(args.out_dir, "confusion_diff.csv"), diff, names_a, fmt="{:+.6f}", provenance=stamp
    )
    if not args.no_figures:
        figures.confusion_diff_heatmap(diff, names_a, os.path.join(args.out_dir, "confusion_diff.png"))
    gain = float(np.trace(diff)) / len(names_a)
    print(f"mean diagonal change (a - b): {gain:+.4f}")
    print(f"diff written to {args.out_dir}")
    return 0


def _confusion_path(arg: str) -> str:
    return os.path.join(arg, "confusion.csv") if os.path.isdir(arg) else arg


def _provenance_comment(provenance: dict | None) -> str | None:
    if not provenance:
        return None
    return "# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items()))


def _write_confusion_csv(path, matrix, class_names, fmt="{:d}", provenance=None) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        comment = _provenance_comment(provenance)
        if comment:
            fh.write(comment + "\n")
        writer = _csv.writer(fh)
        writer.writerow(["gold\\pred"] + class_names)
        for name, row in zip(class_names, np.asarray(matrix)):
            writer.writerow([name] + [fmt.format(v if fmt != "{:d}" else int(v)) for v in row])


def _read_confusion_csv(path) -> tuple[np.ndarray, list[str]]:
    import csv as _csv

    with open(path, "r", encoding="utf-8") as fh:
        rows = [r for r in _csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or len(rows) < 2:
        raise ValidationError(f"{path}: not a confusion CSV")
    names = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if mat.shape != (len(names), len(names)):
        raise ValidationError(f"{path}: confusion matrix is not square")
    return mat, names


def _write_histogram_csv(path, hist, provenance=None) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        comment = _provenance_comment(provenance)
        if comment:
            fh.write(comment + "\n")
        writer = _csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "positive_count", "negative_count"])
        for i in range(len(hist.pos_counts)):
            writer.writerow(
                [
                    f"{hist.bin_edges[i]:.4f}",
                    f"{hist.bin_edges[i + 1]:.4f}",
                    int(hist.pos_counts[i]),
                    int(hist.neg_counts[i]),
                ]
            )


def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


if __name__ == "__main__":
    raise SystemExit(main())
