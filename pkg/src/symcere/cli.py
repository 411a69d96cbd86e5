"""Command-line entry points.

Subcommands: prepare, synth, train, eval, diagnose, ablate.  Options come
from a sectioned JSON config file overridden by flags; every run echoes its
effective config next to its outputs.  The last stdout line of a successful
run is a single JSON record for scripting.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import synth as synthmod
from .data import (
    DataError,
    file_sha256,
    k_core_filter,
    load_interactions,
    load_prepared,
    read_embedding_file,
    temporal_split,
    write_embedding_file,
    write_prepared,
)
from .evaluator import evaluate_all
from .losses import NumericError
from .trainer import TrainConfig, Trainer, run_training

log = logging.getLogger(__name__)


class UsageError(Exception):
    pass


DEFAULT_CONFIG = {
    "data": {"k_core": 5, "train_fraction": 0.8},
    "model": {"backbone": "lightgcn", "embed_dim": 64, "num_layers": 3, "leaky_slope": 0.2},
    "loss": {
        "variant": "symcere",
        "normalize": True,
        "temperature": 0.2,
        "alpha": 0.5,
        "beta": 0.05,
        "lambda_reg": 1e-4,
        "edge_dropout": 0.1,
        "text_mask": 0.2,
    },
    "train": {
        "epochs": 50,
        "batch_size": 512,
        "learning_rate": 1e-3,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "seed": 0,
        "eval_every": 0,
        "patience": 10,
    },
    "eval": {"topk": [10]},
    "diagnostics": {"num_pairs": 100000},
    "synth": {
        "num_users": 1187,
        "num_items": 2833,
        "num_clusters": 10,
        "interactions_per_user": 10,
        "popularity_exponent": 1.0,
        "text_dim": 32,
        "subjective_weight": 0.6,
        "noise_scale": 0.1,
        "seed": 0,
    },
}

_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,), list: (list,)}


def load_config(path: str | None) -> dict:
    """Defaults deep-merged with the JSON file; unknown keys are errors."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    for section, values in raw.items():
        if section not in cfg:
            raise UsageError(f"{path}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in cfg[section]:
                raise UsageError(f"{path}: unknown key {section}.{key}")
            want = type(DEFAULT_CONFIG[section][key])
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, want) or (
                want is int and isinstance(value, bool)
            ):
                raise UsageError(
                    f"{path}: {section}.{key} must be {want.__name__}, "
                    f"got {type(value).__name__}"
                )
            cfg[section][key] = value
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    m, l, t = cfg["model"], cfg["loss"], cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        learning_rate=t["learning_rate"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        seed=t["seed"],
        backbone=m["backbone"],
        embed_dim=m["embed_dim"],
        num_layers=m["num_layers"],
        leaky_slope=m["leaky_slope"],
        loss_variant=l["variant"],
        normalize=l["normalize"],
        temperature=l["temperature"],
        alpha=l["alpha"],
        beta=l["beta"],
        lambda_reg=l["lambda_reg"],
        edge_dropout=l["edge_dropout"],
        text_mask=l["text_mask"],
        eval_every=t["eval_every"],
        patience=t["patience"],
    )


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    """Flag values beat config-file values."""
    pairs = [
        ("seed", "train", "seed"),
        ("loss", "loss", "variant"),
        ("backbone", "model", "backbone"),
        ("epochs", "train", "epochs"),
        ("batch_size", "train", "batch_size"),
        ("k_core", "data", "k_core"),
        ("train_fraction", "data", "train_fraction"),
        ("num_pairs", "diagnostics", "num_pairs"),
    ]
    for attr, section, key in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "no_norm", False):
        cfg["loss"]["normalize"] = False
    topk = getattr(args, "topk", None)
    if topk is not None:
        try:
            cfg["eval"]["topk"] = [int(x) for x in topk.split(",") if x]
        except ValueError as exc:
            raise UsageError(f"bad --topk value {topk!r}") from exc
        if not cfg["eval"]["topk"]:
            raise UsageError("--topk needs at least one cutoff")


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _write_metrics(out_dir: Path, report) -> None:
    (out_dir / "metrics.txt").write_text(report.to_lines(), encoding="utf-8")
    (out_dir / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out_dir / "metrics.json").write_text(report.to_json(), encoding="utf-8")


# -- subcommands -------------------------------------------------------------


def cmd_prepare(args) -> dict:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    records = load_interactions(args.input)
    total = len(records)
    records = k_core_filter(records, cfg["data"]["k_core"])
    if not records:
        raise DataError(
            f"k-core filtering with k={cfg['data']['k_core']} removed every record"
        )
    dataset = temporal_split(records, cfg["data"]["train_fraction"])
    out_dir = Path(args.out)
    manifest = write_prepared(
        out_dir,
        dataset,
        records,
        extra_manifest={
            "source": str(args.input),
            "source_sha256": file_sha256(args.input),
            "k_core": cfg["data"]["k_core"],
            "train_fraction": cfg["data"]["train_fraction"],
            "records_before_filter": total,
            "records_after_filter": len(records),
        },
    )
    _echo_config(cfg, out_dir)
    return {
        "command": "prepare",
        "out": str(out_dir),
        "num_users": manifest["num_users"],
        "num_items": manifest["num_items"],
        "num_train": manifest["num_train"],
        "num_test": manifest["num_test"],
    }


def cmd_synth(args) -> dict:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    s = cfg["synth"]
    for attr, key in [
        ("users", "num_users"),
        ("items", "num_items"),
        ("clusters", "num_clusters"),
        ("per_user", "interactions_per_user"),
        ("exponent", "popularity_exponent"),
        ("text_dim", "text_dim"),
        ("subjective_weight", "subjective_weight"),
        ("noise_scale", "noise_scale"),
    ]:
        value = getattr(args, attr, None)
        if value is not None:
            s[key] = value
    if args.seed is not None:
        s["seed"] = args.seed
    config = synthmod.SynthConfig(**s)
    result = synthmod.generate(config, cfg["data"]["train_fraction"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "interactions.tsv", "w", encoding="utf-8") as fh:
        for rec in result.records:
            fh.write(f"{rec.user_key}\t{rec.item_key}\t{rec.timestamp}\t\n")
    emb_path = out_dir / "embeddings.symc"
    write_embedding_file(emb_path, result.embeddings)
    gt_path = out_dir / "ground_truth.symg"
    synthmod.write_ground_truth(gt_path, result.ground_truth)
    write_prepared(
        out_dir,
        result.dataset,
        result.records,
        extra_manifest={
            "synth_config": s,
            "train_fraction": cfg["data"]["train_fraction"],
            "embeddings_sha256": file_sha256(emb_path),
            "ground_truth_sha256": file_sha256(gt_path),
        },
    )
    _echo_config(cfg, out_dir)
    return {
        "command": "synth",
        "out": str(out_dir),
        "num_users": result.dataset.num_users,
        "num_items": result.dataset.num_items,
        "num_train": result.dataset.n_train,
        "num_test": result.dataset.n_test,
        "text_dim": config.text_dim,
    }


def _load_training_inputs(args):
    dataset = load_prepared(args.data)
    embeddings = read_embedding_file(args.embeddings)
    if embeddings.shape[0] != dataset.n_train:
        raise DataError(
            f"{embeddings.shape[0]} embedding rows for {dataset.n_train} "
            "training interactions"
        )
    return dataset, embeddings


def cmd_train(args) -> dict:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    dataset, embeddings = _load_training_inputs(args)
    tc = train_config_from(cfg)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)

    # with planted structure available, track how the text projection's
    # energy splits across cluster axes vs the sentiment axis each epoch
    callback = None
    series_path = None
    if getattr(args, "ground_truth", None):
        gt = synthmod.read_ground_truth(args.ground_truth)
        row_clusters = gt.item_cluster[dataset.train_items]
        text64 = embeddings.astype(np.float64)
        series_path = out_dir / "anchoring_series.tsv"
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(series_path, "w", encoding="utf-8") as fh:
            fh.write("epoch\tobjective\tsubjective\tresidual\n")

        def callback(trainer, stats):
            e = diag.anchoring_energy(text64, row_clusters, trainer.head, gt)
            with open(series_path, "a", encoding="utf-8") as fh:
                fh.write(
                    f"{stats['epoch']}\t{e.objective:.6f}\t"
                    f"{e.subjective:.6f}\t{e.residual:.6f}\n"
                )
            return {
                "anchoring_objective": e.objective,
                "anchoring_subjective": e.subjective,
            }

    trainer, history = run_training(
        dataset,
        embeddings,
        tc,
        out_dir=out_dir,
        eval_topk=max(cfg["eval"]["topk"]),
        epoch_callback=callback,
    )
    ckpt = out_dir / "checkpoint.symt"
    trainer.save_checkpoint(ckpt)

    table = trainer.graph_embeddings()
    report = evaluate_all(table, dataset, cfg["eval"]["topk"], normalize=tc.normalize)
    _write_metrics(out_dir, report)
    sys.stdout.write(report.to_lines())
    return {
        "command": "train",
        "out": str(out_dir),
        "checkpoint": str(ckpt),
        "epochs_run": trainer.epoch,
        "final_total_loss": history[-1]["total"] if history else None,
        "hr": {str(k): report.hr[k] for k in report.k_values},
        "ndcg": {str(k): report.ndcg[k] for k in report.k_values},
        "anchoring_series": str(series_path) if series_path else None,
    }


def _restore_trainer(args, cfg) -> tuple[Trainer, object, np.ndarray]:
    dataset, embeddings = _load_training_inputs(args)
    tc = train_config_from(cfg)
    trainer = Trainer(dataset.train_view(), embeddings, tc)
    trainer.restore(args.checkpoint, allow_config_mismatch=args.allow_config_mismatch)
    return trainer, dataset, embeddings


def _config_near_checkpoint(args) -> str | None:
    if args.config is not None:
        return args.config
    sibling = Path(args.checkpoint).parent / "effective_config.json"
    if sibling.exists():
        return str(sibling)
    raise UsageError(
        "no --config given and no effective_config.json next to the checkpoint"
    )


def cmd_eval(args) -> dict:
    cfg = load_config(_config_near_checkpoint(args))
    _apply_overrides(cfg, args)
    trainer, dataset, _ = _restore_trainer(args, cfg)
    table = trainer.graph_embeddings()
    report = evaluate_all(
        table, dataset, cfg["eval"]["topk"], normalize=trainer.config.normalize
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_metrics(out_dir, report)
        _echo_config(cfg, out_dir)
    sys.stdout.write(report.to_lines())
    return {
        "command": "eval",
        "checkpoint": str(args.checkpoint),
        "hr": {str(k): report.hr[k] for k in report.k_values},
        "ndcg": {str(k): report.ndcg[k] for k in report.k_values},
        "num_users_evaluated": report.num_users_evaluated,
    }


def cmd_diagnose(args) -> dict:
    cfg = load_config(_config_near_checkpoint(args))
    _apply_overrides(cfg, args)
    trainer, dataset, embeddings = _restore_trainer(args, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    num_pairs = cfg["diagnostics"]["num_pairs"]

    table = trainer.graph_embeddings()
    item_block = table[dataset.num_users :]
    from .losses import l2_normalize, project_text

    projected = l2_normalize(project_text(trainer.head, embeddings.astype(np.float64)))

    result: dict = {"command": "diagnose", "out": str(out_dir)}
    spread = {
        "graph_items": diag.cosine_similarity_stats(item_block, num_pairs, seed=trainer.config.seed),
        "text_projected": diag.cosine_similarity_stats(projected, num_pairs, seed=trainer.config.seed),
    }
    result["cosine_spread"] = {
        name: {
            "mean": s.mean,
            "std_dev": s.std_dev,
            "min": s.min,
            "p25": s.p25,
            "p75": s.p75,
            "max": s.max,
            "num_pairs": s.num_pairs,
            "exhaustive": s.exhaustive,
        }
        for name, s in spread.items()
    }

    variances = diag.dimension_variance(item_block)
    counts, edges = diag.variance_histogram(variances)
    diag.write_histogram_tsv(out_dir / "dimension_variance_hist.tsv", counts, edges)
    result["dimension_variance"] = {
        "mean": float(variances.mean()),
        "min": float(variances.min()),
        "max": float(variances.max()),
    }

    freq = np.bincount(dataset.train_items, minlength=dataset.num_items)
    try:
        r, scatter = diag.popularity_norm_correlation(item_block, freq)
        diag.write_scatter_tsv(
            out_dir / "popularity_norm.tsv", scatter, "log1p_frequency\tnorm"
        )
        result["popularity_norm_r"] = r
    except ValueError as exc:
        result["popularity_norm_r"] = None
        log.warning("popularity/norm correlation unavailable: %s", exc)

    if args.ground_truth:
        gt = synthmod.read_ground_truth(args.ground_truth)
        row_clusters = gt.item_cluster[dataset.train_items]
        energies = diag.anchoring_energy(
            embeddings.astype(np.float64), row_clusters, trainer.head, gt
        )
        result["anchoring"] = {
            "objective": energies.objective,
            "subjective": energies.subjective,
            "residual": energies.residual,
        }

    with open(out_dir / "diagnostics.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


def cmd_ablate(args) -> dict:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    dataset, embeddings = _load_training_inputs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    topk = cfg["eval"]["topk"]

    rows = []
    for variant in ("symcere", "infonce"):
        for normalize in (True, False):
            run_cfg = copy.deepcopy(cfg)
            run_cfg["loss"]["variant"] = variant
            run_cfg["loss"]["normalize"] = normalize
            tc = train_config_from(run_cfg)
            run_dir = out_dir / f"{variant}_{'norm' if normalize else 'raw'}"
            trainer, _ = run_training(dataset, embeddings, tc, out_dir=run_dir)
            trainer.save_checkpoint(run_dir / "checkpoint.symt")
            table = trainer.graph_embeddings()
            report = evaluate_all(table, dataset, topk, normalize=normalize)
            rows.append(
                {
                    "variant": variant,
                    "normalize": normalize,
                    "hr": {k: report.hr[k] for k in topk},
                    "ndcg": {k: report.ndcg[k] for k in topk},
                }
            )
            log.info(
                "ablation %s normalize=%s done: NDCG@%d %.4f",
                variant,
                normalize,
                topk[0],
                report.ndcg[topk[0]],
            )

    full = rows[0]
    for row in rows:
        row["hr_drop_pct"] = {}
        row["ndcg_drop_pct"] = {}
        for k in topk:
            for metric in ("hr", "ndcg"):
                base = full[metric][k]
                row[f"{metric}_drop_pct"][k] = (
                    100.0 * (base - row[metric][k]) / base if base > 0 else float("nan")
                )

    table_path = out_dir / "ablation.tsv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("variant\tnormalize\t" + "\t".join(
            f"hr@{k}\thr_drop_pct@{k}\tndcg@{k}\tndcg_drop_pct@{k}" for k in topk
        ) + "\n")
        for row in rows:
            cells = [row["variant"], "yes" if row["normalize"] else "no"]
            for k in topk:
                cells += [
                    f"{row['hr'][k]:.6f}",
                    f"{row['hr_drop_pct'][k]:.2f}",
                    f"{row['ndcg'][k]:.6f}",
                    f"{row['ndcg_drop_pct'][k]:.2f}",
                ]
            fh.write("\t".join(cells) + "\n")
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    sys.stdout.write(table_path.read_text(encoding="utf-8"))
    return {
        "command": "ablate",
        "out": str(out_dir),
        "rows": [
            {
                "variant": r["variant"],
                "normalize": r["normalize"],
                "hr": {str(k): r["hr"][k] for k in topk},
                "ndcg": {str(k): r["ndcg"][k] for k in topk},
                "hr_drop_pct": {str(k): r["hr_drop_pct"][k] for k in topk},
                "ndcg_drop_pct": {str(k): r["ndcg_drop_pct"][k] for k in topk},
            }
            for r in rows
        ],
    }


# -- argument plumbing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="symcere", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="sectioned JSON config file")
        if seed:
            p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("prepare", help="filter, split, and index an interactions file")
    p.add_argument("--input", required=True, help="tab-separated interactions")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", "--k-core", dest="k_core", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    common(p, seed=False)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--clusters", type=int)
    p.add_argument("--per-user", dest="per_user", type=int)
    p.add_argument("--exponent", type=float)
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--subjective-weight", dest="subjective_weight", type=float)
    p.add_argument("--noise-scale", dest="noise_scale", type=float)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    common(p)
    p.set_defaults(func=cmd_synth)

    def training_io(p):
        p.add_argument("--data", required=True, help="prepared dataset directory")
        p.add_argument("--embeddings", required=True, help="binary embedding file")

    p = sub.add_parser("train", help="train a model")
    training_io(p)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("symcere", "infonce", "bpr_only"))
    p.add_argument("--no-norm", dest="no_norm", action="store_true")
    p.add_argument("--backbone", choices=("lightgcn", "ngcf"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--topk")
    p.add_argument(
        "--ground-truth",
        dest="ground_truth",
        help="planted-structure file; tracks projection energies per epoch",
    )
    common(p)
    p.set_defaults(func=cmd_train)

    def checkpoint_io(p):
        training_io(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument(
            "--allow-config-mismatch",
            action="store_true",
            help="load a checkpoint whose config hash differs (warns)",
        )

    p = sub.add_parser("eval", help="rank and score a checkpoint")
    checkpoint_io(p)
    p.add_argument("--out")
    p.add_argument("--topk")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="geometric diagnostics for a checkpoint")
    checkpoint_io(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ground-truth", dest="ground_truth")
    p.add_argument("--num-pairs", dest="num_pairs", type=int)
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="loss-variant x normalization grid")
    training_io(p)
    p.add_argument("--out", required=True)
    p.add_argument("--topk")
    p.add_argument("--backbone", choices=("lightgcn", "ngcf"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    common(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        record = args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    record["status"] = "ok"
    _emit(record)
    return 0


if __name__ == "__main__":
    sys.exit(main())
