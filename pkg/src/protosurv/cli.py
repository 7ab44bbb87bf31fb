"""Command-line pipeline: synth, prototype, train, eval.

Every command is deterministic given its inputs and seed: repeated runs
produce byte-identical outputs. Floats in CSV files print with 17
significant digits. Exit codes: 0 success, 1 data/runtime error, 2 usage
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import (
    SyntheticSpec,
    kfold_split,
    load_cohort,
    load_manifest,
    load_matrix,
    synth_cohort,
    write_gene_order,
    write_gmt,
    write_matrix,
    write_survival,
)
from .errors import FingerprintMismatch, NoEvents, ProtosurvError
from .evaluation import concordance_index, cross_attention_summary, km_curve, log_rank, stratify_median
from .histology import fit_gmm, slide_representation
from .model import forward_diagnostics
from .pathways import fingerprint
from .pipeline import build_prepared
from .rng import substream
from .survival import (
    SurvivalRecord,
    TrainConfig,
    load_checkpoint,
    predict_cohort,
    save_checkpoint,
    train,
)

MODALITY_CHOICES = ("pht", "ht", "pt", "ph", "p", "h", "t")


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        n_patients=args.patients,
        n_segments=(args.segments[0], args.segments[1]),
        n_patches=(args.patches[0], args.patches[1]),
        d_t=args.d_t,
        d_h=args.d_h,
        n_genes=args.genes,
        signal_modality=args.signal,
        signal_strength=args.signal_strength,
        censoring_rate=args.censoring,
        seed=args.seed,
        n_pathways=args.pathways,
    )
    cohort = synth_cohort(spec)
    write_survival(out / "survival.csv", cohort.records)
    write_gene_order(out / "genes.txt", cohort.gene_order)
    write_gmt(out / "pathways.gmt", cohort.gene_sets)
    patients = []
    for i, pid in enumerate(cohort.patient_ids):
        write_matrix(out / f"{pid}.report.ps3e", cohort.reports[i].segments)
        write_matrix(out / f"{pid}.patches.ps3e", cohort.patches[i].patches)
        write_matrix(out / f"{pid}.expr.ps3e", cohort.expressions[i].values[None, :])
        patients.append(
            {
                "patient_id": pid,
                "report": f"{pid}.report.ps3e",
                "slide": f"{pid}.patches.ps3e",
                "expression": f"{pid}.expr.ps3e",
            }
        )
    doc = {
        "modalities": "pht",
        "gene_order": "genes.txt",
        "gene_sets": "pathways.gmt",
        "survival": "survival.csv",
        "patients": patients,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(patients)}-patient synthetic cohort to {out}")
    return 0


# ---------------------------------------------------------------------------
# prototype
# ---------------------------------------------------------------------------

def cmd_prototype(args) -> int:
    manifest = load_manifest(args.manifest)
    cohort = load_cohort(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    trace_rows: list[str] = []
    meta = {
        "modalities": manifest.modalities,
        "seed": args.seed,
        "n_histology": args.n_histology,
        "nt_mode": args.nt_mode,
    }
    try:
        if "t" in manifest.modalities:
            from .text import compute_n_t

            meta["d_t"] = int(cohort.reports[0].segments.shape[1])
            meta["max_segments"] = int(max(r.segments.shape[0] for r in cohort.reports))
            meta["n_text"] = int(compute_n_t(cohort.reports, args.nt_mode))
            for report in cohort.reports:
                path = out / f"{report.patient_id}.report.ps3e"
                write_matrix(path, report.segments)
                written.append(path)
        if "h" in manifest.modalities:
            if cohort.patches is None:
                raise ProtosurvError("manifest provides precomputed slide representations; nothing to fit")
            meta["d_h"] = int(cohort.patches[0].patches.shape[1])
            for i, patches in enumerate(cohort.patches):
                try:
                    params, trace = fit_gmm(patches, args.n_histology, substream(args.seed, "gmm", i))
                except ProtosurvError as exc:
                    raise ProtosurvError(f"patient {patches.slide_id}: {exc}") from exc
                path = out / f"{patches.slide_id}.slide.ps3e"
                write_matrix(path, slide_representation(params))
                written.append(path)
                for it, ll in enumerate(trace.log_likelihoods):
                    trace_rows.append(
                        f"{patches.slide_id},{it},{_fmt(ll)},{int(trace.converged)}"
                    )
    except (ProtosurvError, FileNotFoundError, OSError) as exc:
        for path in written:
            path.unlink(missing_ok=True)
        return _fail(str(exc))
    if trace_rows:
        with open(out / "em_trace.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("patient_id,iteration,avg_log_likelihood,converged\n")
            fh.writelines(row + "\n" for row in trace_rows)
    with open(out / "prototype_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"prototype stage complete: {len(written)} matrices in {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

# keys a config file may carry beyond TrainConfig fields: the run metadata
# cmd_train writes into effective_config.json, so that file feeds back in as-is
_RUN_METADATA_KEYS = {"folds", "manifest", "prototypes", "out"}


def _effective_config(args) -> tuple[TrainConfig, int]:
    """Defaults, overlaid by --config JSON, overlaid by explicit flags."""
    known = {f.name for f in fields(TrainConfig)}
    merged: dict = {}
    folds = None
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = set(doc) - known - _RUN_METADATA_KEYS
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        folds = doc.get("folds")
        merged.update({k: v for k, v in doc.items() if k in known})
    flag_map = {
        "seed": args.seed,
        "fusion_mode": args.fusion_mode,
        "modalities": args.modalities,
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "weight_decay": args.weight_decay,
        "d_e": args.d_e,
        "d_r": args.d_r,
        "n_histology": args.n_histology,
        "n_pathways": args.n_pathways,
        "text_proto_mode": args.nt_mode,
        "shared_beta_mlp": args.shared_beta or None,
    }
    merged.update({k: v for k, v in flag_map.items() if v is not None})
    if args.folds is not None:
        folds = args.folds
    return TrainConfig(**merged), int(folds) if folds is not None else 5


def _load_prototype_stage(cohort, proto_dir: Path, config: TrainConfig):
    """Slide representations and frozen text dims from the prototype output."""
    meta_path = proto_dir / "prototype_meta.json"
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("n_histology") != config.n_histology and "h" in config.modalities:
        raise ProtosurvError(
            f"prototypes fitted with n_histology={meta.get('n_histology')}, config asks {config.n_histology}"
        )
    slide_reps = None
    if "h" in config.modalities:
        slide_reps = [load_matrix(proto_dir / f"{pid}.slide.ps3e") for pid in cohort.patient_ids]
    return slide_reps, meta.get("n_text"), meta.get("max_segments")


def cmd_train(args) -> int:
    config, n_folds = _effective_config(args)
    manifest = load_manifest(args.manifest)
    manifest.modalities = config.modalities
    cohort = load_cohort(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    proto_dir = Path(args.prototypes) if args.prototypes else None
    if proto_dir is not None:
        slide_reps, n_text, max_segments = _load_prototype_stage(cohort, proto_dir, config)
    else:
        slide_reps = n_text = max_segments = None
    prepared, dims, mask_set = build_prepared(
        cohort, config, slide_reps=slide_reps, n_text=n_text, max_segments=max_segments
    )
    digest = fingerprint(cohort.gene_order, mask_set) if mask_set is not None else ""

    folds = kfold_split(cohort.patient_ids, n_folds, config.seed)
    with open(out / "folds.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": config.seed, "k": n_folds, "folds": folds}, fh, indent=1, sort_keys=True)
        fh.write("\n")

    position = {pid: i for i, pid in enumerate(cohort.patient_ids)}
    history_rows: list[str] = []
    summary: list[tuple[str, float]] = []
    failures = 0
    for fold_no, held_ids in enumerate(folds):
        held_set = set(held_ids)
        train_idx = np.asarray([i for i, p in enumerate(cohort.patient_ids) if p not in held_set])
        try:
            model, history = train(prepared.subset(train_idx), config)
        except NoEvents as exc:
            print(f"fold {fold_no} aborted: {exc}", file=sys.stderr)
            failures += 1
            continue
        save_checkpoint(out / f"fold{fold_no}.ckpt", model, config, digest)
        for stats in history:
            history_rows.append(
                f"{fold_no},{stats.epoch},{_fmt(stats.learning_rate)},{_fmt(stats.mean_loss)}"
            )
        held_idx = np.asarray([position[p] for p in held_ids])
        held = prepared.subset(held_idx)
        risks = predict_cohort(model, held, config.fusion_mode)
        records = [SurvivalRecord(p, float(t), int(e)) for p, t, e in zip(held.patient_ids, held.times, held.events)]
        summary.append((str(fold_no), concordance_index(risks, records)))

    with open(out / "history.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fold,epoch,learning_rate,mean_loss\n")
        fh.writelines(row + "\n" for row in history_rows)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fold,metric,value\n")
        for fold_name, value in summary:
            fh.write(f"{fold_name},c_index,{_fmt(value)}\n")
        if summary:
            values = np.asarray([v for _, v in summary])
            fh.write(f"mean,c_index,{_fmt(values.mean())}\n")
            fh.write(f"std,c_index,{_fmt(values.std())}\n")
    effective = {
        **asdict(config),
        "folds": n_folds,
        "manifest": str(args.manifest),
        "prototypes": str(args.prototypes) if args.prototypes else None,
        "out": str(out),
    }
    with open(out / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(effective, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if summary:
        mean = float(np.mean([v for _, v in summary]))
        print(f"trained {len(summary)}/{len(folds)} folds, mean held-out c_index {mean:.4f}")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_TOKEN_PREFIX = {"histology": "H", "text": "T"}


def _token_names(block: str, size: int, mask_set) -> list[str]:
    if block == "pathway" and mask_set is not None:
        return list(mask_set.names)
    return [f"{_TOKEN_PREFIX.get(block, 'X')}{i}" for i in range(size)]


def cmd_eval(args) -> int:
    models_dir = Path(args.models)
    checkpoint_paths = sorted(models_dir.glob("fold*.ckpt"))
    if not checkpoint_paths:
        return _fail(f"no fold*.ckpt files under {models_dir}")
    with open(models_dir / "folds.json", encoding="utf-8") as fh:
        folds_doc = json.load(fh)
    models = []
    for path in checkpoint_paths:
        models.append((int(path.stem.removeprefix("fold")), *load_checkpoint(path)))
    config = models[0][2]

    manifest = load_manifest(args.manifest)
    manifest.modalities = config.modalities
    cohort = load_cohort(manifest)
    proto_dir = Path(args.prototypes) if args.prototypes else None
    if proto_dir is not None:
        slide_reps, n_text, max_segments = _load_prototype_stage(cohort, proto_dir, config)
    else:
        slide_reps = n_text = max_segments = None
    prepared, dims, mask_set = build_prepared(
        cohort, config, slide_reps=slide_reps, n_text=n_text, max_segments=max_segments
    )
    digest = fingerprint(cohort.gene_order, mask_set) if mask_set is not None else ""
    for fold_no, _, _, stored in models:
        if stored != digest:
            raise FingerprintMismatch(
                f"fold {fold_no}: checkpoint trained against different gene/pathway definitions"
            )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    position = {pid: i for i, pid in enumerate(cohort.patient_ids)}
    fold_cindex: list[tuple[int, float]] = []
    pooled_risks: list[float] = []
    pooled_records: list[SurvivalRecord] = []
    attention_rows: list[str] = []
    pairs = [tuple(p.split(":")) for p in (args.attention or [])]
    for fold_no, model, _, _ in models:
        held_ids = folds_doc["folds"][fold_no]
        held = prepared.subset(np.asarray([position[p] for p in held_ids]))
        risks = predict_cohort(model, held, config.fusion_mode)
        records = [SurvivalRecord(p, float(t), int(e)) for p, t, e in zip(held.patient_ids, held.times, held.events)]
        fold_cindex.append((fold_no, concordance_index(risks, records)))
        pooled_risks.extend(float(r) for r in risks)
        pooled_records.extend(records)
        for query, key in pairs:
            for j, pid in enumerate(held.patient_ids):
                one = held.subset(np.asarray([j]))
                _, fused, validity = forward_diagnostics(one, model.values, model.dims, config.fusion_mode)
                spans, start = {}, 0
                for name, size in fused.block_sizes.items():
                    spans[name] = (start, start + size)
                    start += size
                summary = cross_attention_summary(
                    fused.attention[0],
                    spans,
                    _token_names(key, fused.block_sizes[key], mask_set),
                    query,
                    key,
                    query_validity=validity[query][0],
                    key_validity=validity[key][0],
                )
                for rank, (token, score) in enumerate(summary.ranking):
                    attention_rows.append(f"{fold_no},{pid},{query},{key},{rank},{token},{_fmt(score)}")

    with open(out / "metrics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fold,metric,value\n")
        for fold_no, value in fold_cindex:
            fh.write(f"{fold_no},c_index,{_fmt(value)}\n")
        values = np.asarray([v for _, v in fold_cindex])
        fh.write(f"mean,c_index,{_fmt(values.mean())}\n")
        fh.write(f"std,c_index,{_fmt(values.std())}\n")

    labels = stratify_median(np.asarray(pooled_risks))
    groups = {
        "high": [r for r, g in zip(pooled_records, labels) if g == "high"],
        "low": [r for r, g in zip(pooled_records, labels) if g == "low"],
    }
    with open(out / "km_curves.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("group,time,survival,at_risk\n")
        for group, records in groups.items():
            if not records:
                continue
            curve = km_curve(records)
            for t, s, n in zip(curve.times, curve.survival, curve.at_risk):
                fh.write(f"{group},{_fmt(t)},{_fmt(s)},{n}\n")
    with open(out / "logrank.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("statistic,p_value\n")
        if groups["high"] and groups["low"]:
            result = log_rank(groups["high"], groups["low"])
            fh.write(f"{_fmt(result.statistic)},{_fmt(result.p_value)}\n")
    if pairs:
        with open(out / "attention_summary.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("fold,patient_id,query_block,key_block,rank,token,dispersion\n")
            fh.writelines(row + "\n" for row in attention_rows)
    print(f"evaluated {len(fold_cindex)} folds, mean c_index {float(values.mean()):.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protosurv",
        description="Prototype-based three-modal survival pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort on disk")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--patients", type=int, default=300)
    p_synth.add_argument("--signal", choices=("pathway", "histology", "text"), default="pathway")
    p_synth.add_argument("--signal-strength", type=float, default=2.0)
    p_synth.add_argument("--censoring", type=float, default=0.25)
    p_synth.add_argument("--genes", type=int, default=200)
    p_synth.add_argument("--pathways", type=int, default=50)
    p_synth.add_argument("--d-t", type=int, default=16)
    p_synth.add_argument("--d-h", type=int, default=16)
    p_synth.add_argument("--segments", type=int, nargs=2, default=(3, 8))
    p_synth.add_argument("--patches", type=int, nargs=2, default=(64, 128))

    p_proto = sub.add_parser("prototype", help="fit slide mixtures, freeze text prototype counts")
    p_proto.add_argument("--manifest", required=True)
    p_proto.add_argument("--out", required=True)
    p_proto.add_argument("--seed", type=int, default=0)
    p_proto.add_argument("--n-histology", type=int, default=16)
    p_proto.add_argument("--nt-mode", choices=("average", "p90"), default="average")

    p_train = sub.add_parser("train", help="k-fold training with checkpoints")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--prototypes", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--config", default=None, help="JSON file of TrainConfig fields; flags win")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--folds", type=int, default=None, help="fold count (default 5)")
    p_train.add_argument("--fusion-mode", choices=("full", "late", "hierarchical"), default=None)
    p_train.add_argument("--modalities", choices=MODALITY_CHOICES, default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--batch-size", type=int, default=None)
    p_train.add_argument("--weight-decay", type=float, default=None)
    p_train.add_argument("--d-e", type=int, default=None)
    p_train.add_argument("--d-r", type=int, default=None)
    p_train.add_argument("--n-histology", type=int, default=None)
    p_train.add_argument("--n-pathways", type=int, default=None)
    p_train.add_argument("--nt-mode", choices=("average", "p90"), default=None)
    p_train.add_argument("--shared-beta", action="store_true")

    p_eval = sub.add_parser("eval", help="held-out metrics, KM curves, log-rank, attention summaries")
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--prototypes", default=None)
    p_eval.add_argument("--models", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument(
        "--attention",
        action="append",
        default=None,
        metavar="QUERY:KEY",
        help="emit per-patient attention dispersion for a query/key block pair",
    )
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "prototype": cmd_prototype,
    "train": cmd_train,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ProtosurvError, FileNotFoundError, OSError, ValueError, KeyError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
