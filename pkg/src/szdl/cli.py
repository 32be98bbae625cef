"""Command-line entry point orchestrating the whole pipeline.

Subcommands: synth, split, train, eval, cam, compare, augment-preview,
gradcheck.  All randomness flows from --seed; outputs are JSON/CSV/NIfTI
files under --out.  Exit codes: 0 success, 1 configuration error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import ops
from .augment import AugmentSpec, apply_plan, plan_pipeline
from .errors import ConfigError, DataError, NumericalError, SzdlError
from .evalstats import ScoredSet, delong_test, report_dict
from .gradcam import average_cam, export_cam, grad_cam, threshold_cam, write_mid_slices
from .manifest import SITES, assign_splits, hold_out_site, load_manifest, save_manifest
from .model import ModelConfig, build_model
from .nifti import load_volume, save_volume
from .phantom import PhantomSpec, synthesize_dataset
from .tensor import Tape, Tensor, backward
from .train import (
    TrainConfig,
    fit,
    load_checkpoint,
    run_generalization,
    save_checkpoint,
    score_records,
)

RUN_CONFIG_SCHEMA_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """Argparse that reports usage problems as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def load_run_config(path) -> TrainConfig:
    """Parse and strictly validate the run-config JSON document."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(raw) - {"schema_version", "train"}
    if unknown:
        raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
    version = raw.get("schema_version")
    if version != RUN_CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}, "
                          f"expected {RUN_CONFIG_SCHEMA_VERSION}")
    try:
        return TrainConfig.from_dict(raw.get("train", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def save_run_config(config: TrainConfig, path) -> None:
    payload = {"schema_version": RUN_CONFIG_SCHEMA_VERSION, "train": config.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_scores_csv(scored: ScoredSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "score", "label"])
        ids = scored.subject_ids or [f"case{i:05d}" for i in range(len(scored.labels))]
        for sid, score, label in zip(ids, scored.scores, scored.labels):
            writer.writerow([sid, repr(float(score)), int(label)])


def read_scores_csv(path) -> ScoredSet:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"score file not found: {path}") from None
    if not rows or rows[0][:3] != ["subject_id", "score", "label"]:
        raise DataError(f"{path}: expected header subject_id,score,label")
    ids, scores, labels = [], [], []
    for row in rows[1:]:
        if len(row) < 3:
            raise DataError(f"{path}: malformed row {row!r}")
        ids.append(row[0])
        scores.append(float(row[1]))
        labels.append(int(row[2]))
    return ScoredSet(np.array(scores), np.array(labels), subject_ids=tuple(ids))


def write_roc_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for point in report["curve"]:
            writer.writerow([point["threshold"], point["fpr"], point["tpr"]])


def _align_score_files(a: ScoredSet, b: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Match two score files on subject id; labels must agree."""
    if a.subject_ids is None or b.subject_ids is None:
        raise DataError("score files must carry subject ids for comparison")
    index_b = {sid: i for i, sid in enumerate(b.subject_ids)}
    if set(a.subject_ids) != set(index_b):
        raise DataError("score files cover different subject sets")
    order = sorted(range(len(a.subject_ids)), key=lambda i: a.subject_ids[i])
    sa, sb, labels = [], [], []
    for i in order:
        j = index_b[a.subject_ids[i]]
        if a.labels[i] != b.labels[j]:
            raise DataError(f"label mismatch for subject {a.subject_ids[i]!r}")
        sa.append(a.scores[i])
        sb.append(b.scores[j])
        labels.append(int(a.labels[i]))
    return np.array(sa), np.array(sb), np.array(labels)


def _delong_block(a: ScoredSet, b: ScoredSet) -> dict:
    sa, sb, labels = _align_score_files(a, b)
    r = delong_test(sa, sb, labels)
    return {"auc_a": r.auc_a, "auc_b": r.auc_b, "variance": r.variance,
            "z": r.z, "p_value": r.p_value, "p_one_sided": r.p_one_sided,
            "degenerate": r.degenerate, "n": int(len(labels))}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = PhantomSpec(size=args.size, effect_size=args.effect_size,
                       noise_std=args.noise_std, seed=args.seed)
    records = synthesize_dataset(args.out, args.count, spec, site=args.site,
                                 subject_prefix=args.prefix)
    print(f"wrote {len(records)} scans and manifest.json to {args.out}")
    return 0


def cmd_split(args) -> int:
    records = load_manifest(args.manifest)
    if args.hold_out_site:
        records = hold_out_site(records, args.hold_out_site, seed=args.seed)
    else:
        ratios = tuple(int(x) for x in args.ratios.split(","))
        if len(ratios) != 3:
            raise ConfigError(f"--ratios needs three comma-separated tenths, got {args.ratios}")
        records = assign_splits(records, ratios=ratios, seed=args.seed)
    out = args.out or args.manifest
    save_manifest(records, out)
    counts = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    print(f"split {len(records)} scans: {counts}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    if args.workers is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "workers": args.workers})
    records = load_manifest(args.manifest)
    data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.hold_out_site:
        result = run_generalization(config, records, args.hold_out_site,
                                    data_root=data_root)
        model, adam, history = result["model"], result["adam"], result["history"]
        (out / "generalization_report.json").write_text(
            json.dumps(result["report"], indent=2) + "\n")
        write_scores_csv(result["scored"], out / "test_scores.csv")
        save_manifest(result["records"], out / "manifest_holdout.json")
    else:
        model, adam, history = fit(config, records, data_root=data_root)

    save_checkpoint(model, adam, history, out / "model.ckpt")
    (out / "history.csv").write_text(history.to_csv())
    save_run_config(config, out / "run_config.json")
    best = history.records[history.best_epoch - 1]
    print(f"trained {len(history.records)} epochs ({history.stop_reason}); "
          f"best epoch {history.best_epoch}: val_loss {best.val_loss:.4f}, "
          f"val_auc {best.val_auc:.4f}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scores:
        scored = read_scores_csv(args.scores)
    elif args.checkpoint and args.manifest:
        model, _, _ = load_checkpoint(Path(args.checkpoint))
        records = [r for r in load_manifest(args.manifest) if r.split == args.split]
        if not records:
            raise DataError(f"manifest has no records in split {args.split!r}")
        data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
        scored = score_records(model, records, data_root=data_root)
        write_scores_csv(scored, out / "scores.csv")
    else:
        raise ConfigError("eval needs either --scores or --checkpoint with --manifest")

    report = report_dict(scored)
    if args.scores_b:
        report["delong"] = _delong_block(scored, read_scores_csv(args.scores_b))
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    write_roc_csv(report, out / "roc.csv")
    print(f"auc {report['auc']:.4f} over {report['n']} cases -> {out / 'report.json'}")
    return 0


def cmd_compare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    block = _delong_block(read_scores_csv(args.scores_a), read_scores_csv(args.scores_b))
    (out / "delong.json").write_text(json.dumps(block, indent=2) + "\n")
    if block["degenerate"]:
        print("degenerate comparison: zero variance with unequal AUCs")
        return 3
    print(f"auc_a {block['auc_a']:.4f} vs auc_b {block['auc_b']:.4f}: "
          f"p = {block['p_value']:.4g}")
    return 0


def cmd_cam(args) -> int:
    model, _, _ = load_checkpoint(Path(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.volume:
        volumes = [load_volume(Path(args.volume))]
    else:
        if not args.manifest:
            raise ConfigError("cam needs --volume or --manifest")
        records = [r for r in load_manifest(args.manifest)
                   if r.split == args.split and r.label == args.target_class]
        if not records:
            raise DataError(f"no class-{args.target_class} records in split {args.split!r}")
        data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
        volumes = []
        for rec in records:
            path = Path(rec.scan_path)
            volumes.append(load_volume(path if path.is_absolute() else data_root / path))

    cams = [grad_cam(model, vol, args.target_class) for vol in volumes]
    averaged = average_cam(cams)
    export_cam(averaged, out / "cam.nii")
    write_mid_slices(averaged.values, out, "cam")
    mask = threshold_cam(averaged, args.threshold)
    summary = {
        "n_subjects": len(cams),
        "target_class": args.target_class,
        "threshold": args.threshold,
        "suprathreshold_voxels": int(mask.sum()),
        "degenerate_maps": sum(c.degenerate for c in cams),
        "source_layer": averaged.source_layer,
    }
    (out / "cam_report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"averaged CAM over {len(cams)} scans -> {out / 'cam.nii'} "
          f"({summary['suprathreshold_voxels']} voxels >= {args.threshold})")
    return 0


def cmd_augment_preview(args) -> int:
    volume = load_volume(Path(args.volume))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = AugmentSpec() if not args.config else \
        load_run_config(args.config).augment_spec
    save_volume(volume, out / "original.nii")
    write_mid_slices(volume.data, out, "original")
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    forced = AugmentSpec.from_dict({**spec.to_dict(), "p_blur": 1.0, "p_noise": 1.0,
                                    "p_spatial": 1.0, "p_bias": 1.0, "p_motion": 1.0})
    # keep drawing plans until both spatial branches have been previewed
    seen: dict[str, object] = {}
    for _ in range(64):
        for name, kwargs in plan_pipeline(forced, rng):
            seen.setdefault(name, kwargs)
        if "affine" in seen and "elastic" in seen:
            break
    for name, kwargs in seen.items():
        transformed = apply_plan(volume, [(name, kwargs)])
        save_volume(transformed, out / f"{name}.nii")
        write_mid_slices(transformed.data, out, name)
    print(f"wrote original + {len(seen)} transformed volumes to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = ModelConfig(input_extent=16, width_scale=1 / 8, se_ratio=4,
                         classifier_dims=(8, 4), dropout_p=0.0)
    model = build_model(config, seed=args.seed, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 99]))
    x = Tensor(rng.random((2, 1, 16, 16, 16)))
    labels = np.array([0, 1])

    def loss_value() -> float:
        snap = {k: s.copy() for k, s in model.bn_states.items()}
        result = model.apply(x, mode="train")
        value = ops.cross_entropy(result.logits, labels).item()
        model.bn_states.update(snap)
        return value

    tape = Tape()
    result = model.apply(x, mode="train", tape=tape)
    loss = ops.cross_entropy(result.logits, labels, tape=tape)
    model.zero_grad()
    backward(tape, loss)

    step = 1e-5
    worst = {"name": None, "rel_error": 0.0}
    checked = 0
    for p in model.parameters():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = gflat[i]
            denom = max(abs(numeric), abs(analytic), 1e-12)
            rel = abs(numeric - analytic) / denom if abs(numeric - analytic) > 1e-9 else 0.0
            checked += 1
            if rel > worst["rel_error"]:
                worst = {"name": p.name, "rel_error": float(rel)}
    passed = worst["rel_error"] < 1e-4
    report = {"coordinates_checked": checked, "worst": worst, "tolerance": 1e-4,
              "passed": passed}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"gradient check over {checked} coordinates: worst rel error "
          f"{worst['rel_error']:.3g} ({'pass' if passed else 'FAIL'})")
    if not passed:
        raise NumericalError("finite-difference gradient check failed")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="szdl", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset with manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10, help="volumes per class")
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--effect-size", type=float, default=0.5)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--site", default="SYNTH", choices=SITES)
    p.add_argument("--prefix", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="assign subject-level train/val/test splits")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="8,1,1")
    p.add_argument("--hold-out-site", default=None, choices=SITES)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train from a run config and manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--data-root", default=None)
    p.add_argument("--hold-out-site", default=None, choices=SITES)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ROC/AUC report from scores or a checkpoint")
    p.add_argument("--scores", default=None, help="score CSV (subject_id,score,label)")
    p.add_argument("--scores-b", default=None, help="second score CSV for a DeLong block")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="DeLong test between two score files")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("cam", help="averaged Grad-CAM volume and mid-slices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--target-class", type=int, default=1, choices=(0, 1))
    p.add_argument("--threshold", type=float, default=0.85)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("augment-preview", help="write before/after volumes per transform")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SzdlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
