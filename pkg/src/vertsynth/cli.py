"""Command-line entry point: stage subcommands plus an end-to-end pipeline.

Configuration is a TOML file of ``key = value`` sections; unknown sections
or keys are rejected. Selected flags override the file. Exit codes: 0 ok,
1 internal error, 2 usage error, 3 missing upstream artifact, 4 data
validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_DATA = 0, 1, 2, 3, 4


class CliError(Exception):
    exit_code = EXIT_INTERNAL


class ConfigKeyError(CliError):
    exit_code = EXIT_USAGE


class MissingArtifact(CliError):
    exit_code = EXIT_MISSING


class DataError(CliError):
    exit_code = EXIT_DATA


CONFIG_SCHEMA = {
    "phantom": {
        "n_cases", "n_vertebrae", "volume_shape", "spacing", "body_height_mm",
        "gap_mm", "curvature_amp_mm", "height_gradient", "height_jitter",
        "cortical_hu", "trabecular_hu", "soft_tissue_hu", "noise_sigma_hu",
        "seed", "balanced",
    },
    "preprocess": {"h_max_mm", "patch_size", "slice_stride"},
    "hgam": {"epochs", "seed", "base_width", "lr", "holdout_fraction"},
    "train": {
        "batch_size", "lr0", "beta1", "beta2", "decay_start", "total_epochs",
        "decay_floor", "base_width", "d_base_width", "seed", "checkpoint_every",
        "val_fraction",
    },
    "synthesis": {"mode"},
    "grading": {"features", "folds", "seed"},
}

DEFAULT_CONFIG = {
    "phantom": {
        "n_cases": 4, "n_vertebrae": 5, "volume_shape": [96, 72, 72],
        "spacing": [2.0, 1.0, 1.0], "body_height_mm": 25.0, "gap_mm": 5.0,
        "curvature_amp_mm": 0.0, "height_gradient": 0.12, "height_jitter": 0.03,
        "cortical_hu": 700.0, "trabecular_hu": 250.0, "soft_tissue_hu": 40.0,
        "noise_sigma_hu": 8.0, "seed": 0, "balanced": False,
    },
    "preprocess": {"h_max_mm": 40.0, "patch_size": 64, "slice_stride": 1},
    "hgam": {"epochs": 6, "seed": 0, "base_width": 16, "lr": 1e-3, "holdout_fraction": 0.2},
    "train": {
        "batch_size": 16, "lr0": 2e-4, "beta1": 0.5, "beta2": 0.999,
        "decay_start": 2, "total_epochs": 5, "decay_floor": 0.0,
        "base_width": 16, "d_base_width": 16, "seed": 0,
        "checkpoint_every": 5, "val_fraction": 0.1,
    },
    "synthesis": {"mode": "two_step"},
    "grading": {"features": "segs", "folds": 5, "seed": 0},
}


def load_config(path=None):
    """Merge the TOML file over the defaults, rejecting unknown keys."""
    config = {k: dict(v) for k, v in DEFAULT_CONFIG.items()}
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing config file: {path}")
    with open(path, "rb") as fh:
        try:
            user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigKeyError(f"config parse error: {e}") from e
    for section, values in user.items():
        if section not in CONFIG_SCHEMA:
            raise ConfigKeyError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigKeyError(f"top-level key {section!r} outside a section")
        for key, value in values.items():
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigKeyError(f"unknown config key {section}.{key}")
            config[section][key] = value
    return config


def config_hash(config) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _phantom_config(section, seed=None):
    from .phantom import PhantomConfig

    kwargs = dict(section)
    kwargs.pop("n_cases", None)
    kwargs.pop("balanced", None)
    kwargs["volume_shape"] = tuple(kwargs["volume_shape"])
    kwargs["spacing"] = tuple(kwargs["spacing"])
    if seed is not None:
        kwargs["seed"] = seed
    return PhantomConfig(**kwargs)


def _train_config(config):
    from .training import TrainConfig

    kwargs = dict(config["train"])
    kwargs["image_size"] = config["preprocess"]["patch_size"]
    kwargs["h_max_mm"] = config["preprocess"]["h_max_mm"]
    return TrainConfig(**kwargs)


def case_dirs(root) -> list:
    root = Path(root)
    if not root.exists():
        raise MissingArtifact(f"missing case directory: {root}")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise MissingArtifact(f"no cases under {root}")
    return dirs


# -- stages ----------------------------------------------------------------------


def stage_phantom(config, out_dir, n_cases=None, seed=None, balanced=None):
    from .phantom import sample_fracture_specs, write_case

    section = config["phantom"]
    n_cases = n_cases if n_cases is not None else section["n_cases"]
    base_seed = seed if seed is not None else section["seed"]
    balanced = balanced if balanced is not None else section["balanced"]
    out_dir = Path(out_dir)
    from .phantom import LabelVolume, apply_compression, generate_phantom

    rng = np.random.default_rng((base_seed, 77))
    written = []
    for i in range(n_cases):
        cfg = _phantom_config(section, seed=base_seed + i)
        vol, labels, meta = generate_phantom(cfg)
        healthy_labels = labels.data.copy()
        for spec in sample_fracture_specs(meta, rng, balanced=balanced):
            vol, labels, meta = apply_compression(vol, labels, meta, spec)
        meta.case_id = f"case_{i:04d}"
        write_case(out_dir / meta.case_id, vol, labels, meta,
                   LabelVolume(healthy_labels, labels.spacing))
        written.append(out_dir / meta.case_id)
    return written


def stage_preprocess(config, case_dir, out_dir):
    from .phantom import read_case
    from .preprocess import preprocess_case, save_canvases

    case_dir = Path(case_dir)
    if not (case_dir / "meta.json").exists():
        raise MissingArtifact(f"missing upstream artifact: case {case_dir}")
    vol, labels, meta = read_case(case_dir)
    per_vertebra, _ = preprocess_case(
        vol, labels, meta,
        h_max_mm=config["preprocess"]["h_max_mm"],
        patch_size=config["preprocess"]["patch_size"],
    )
    save_canvases(out_dir, per_vertebra, meta)
    return out_dir


def _classifier_canvases(config, data_root):
    """Masked canvases labelled by adjacent-fracture visibility."""
    from .phantom import read_case
    from .preprocess import preprocess_case

    images, labels = [], []
    stride = config["preprocess"]["slice_stride"]
    for cdir in case_dirs(data_root):
        vol, labs, meta = read_case(cdir)
        per_vertebra, _ = preprocess_case(
            vol, labs, meta,
            h_max_mm=config["preprocess"]["h_max_mm"],
            patch_size=config["preprocess"]["patch_size"],
        )
        grades = {v.label: v.genant_grade for v in meta.vertebrae}
        for label, vc in sorted(per_vertebra.items()):
            positive = any(grades.get(label + d, 0) > 0 for d in (-1, 1))
            for canvas in vc.canvases[::stride]:
                images.append(canvas.image)
                labels.append(int(positive))
    return np.stack(images), np.array(labels)


def stage_hgam_train(config, data_root, out_path):
    from .attention import save_classifier, train_fracture_classifier

    images, labels = _classifier_canvases(config, data_root)
    section = config["hgam"]
    bundle = train_fracture_classifier(
        images, labels, epochs=section["epochs"], lr=section["lr"],
        seed=section["seed"], holdout_fraction=section["holdout_fraction"],
        base_width=section["base_width"],
    )
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_classifier(out_path, bundle)
    return bundle


def _load_npz_dataset(config, prep_root, classifier):
    from .training import CanvasDataset, TrainingError
    from .attention import attention_maps_for

    prep_root = Path(prep_root)
    index_files = sorted(prep_root.glob("*/index.json"))
    if not index_files:
        raise MissingArtifact(f"missing upstream artifact: preprocessed canvases under {prep_root}")
    rows = {k: [] for k in ("masked", "mask", "ratio", "target", "target_seg", "ahvs", "h_real")}
    groups = []
    slot = None
    gid = 0
    for index_file in index_files:
        for entry in json.loads(index_file.read_text()):
            if not entry["healthy"]:
                continue
            npz = np.load(index_file.parent / entry["file"])
            s = (int(npz["slot_start"][0]), int(npz["slot_start"][0] + npz["slot_rows"][0]))
            if slot is None:
                slot = s
            elif slot != s:
                raise TrainingError("canvases disagree on slot geometry")
            n = npz["masked"].shape[0]
            rows["masked"].append(npz["masked"])
            rows["mask"].append(npz["mask"])
            rows["ratio"].append(npz["ratio"])
            rows["target"].append(npz["target"])
            rows["target_seg"].append(npz["target_seg"])
            rows["ahvs"].append(npz["ahvs"])
            rows["h_real"].append(npz["h_real"])
            groups.append(np.full(n, gid))
            gid += 1
    if not rows["masked"]:
        raise DataError("no healthy training data")
    size = config["preprocess"]["patch_size"]
    masked = np.concatenate(rows["masked"]).astype(np.float32)
    maps = attention_maps_for(classifier.model, masked, sizes=(size // 2, size))
    return CanvasDataset(
        masked=masked,
        mask=np.concatenate(rows["mask"]).astype(np.float32),
        ratio=np.concatenate(rows["ratio"]).astype(np.float32),
        attn_half=np.stack([m.healthy[size // 2] for m in maps]).astype(np.float32),
        attn_full=np.stack([m.healthy[size] for m in maps]).astype(np.float32),
        target=np.concatenate(rows["target"]).astype(np.float32),
        target_seg=np.concatenate(rows["target_seg"]).astype(np.float32),
        ahvs=np.concatenate(rows["ahvs"]).astype(np.float32),
        h_real=np.concatenate(rows["h_real"]).astype(np.float32),
        slot=slot,
        group=np.concatenate(groups),
    )


def stage_train(config, prep_root, clf_path, out_dir):
    from .attention import load_classifier
    from .training import fit

    if not Path(clf_path).exists():
        raise MissingArtifact(f"missing upstream artifact: classifier {clf_path}")
    classifier = load_classifier(clf_path)
    dataset = _load_npz_dataset(config, prep_root, classifier)
    result = fit(dataset, _train_config(config), out_dir=out_dir)
    return result


def _load_models(ckpt_path):
    from .training import load_checkpoint

    if not Path(ckpt_path).exists():
        raise MissingArtifact(f"missing upstream artifact: checkpoint {ckpt_path}")
    return load_checkpoint(ckpt_path)


def _case_synthesizer(case_dir, ckpt_path, clf_path):
    from .attention import load_classifier
    from .phantom import read_case
    from .synthesis import CaseSynthesizer

    models, train_cfg, _ = _load_models(ckpt_path)
    if not Path(clf_path).exists():
        raise MissingArtifact(f"missing upstream artifact: classifier {clf_path}")
    classifier = load_classifier(clf_path)
    vol, labels, meta = read_case(case_dir)
    return CaseSynthesizer(
        vol, labels, meta, models, classifier,
        patch_size=train_cfg.image_size, h_max_mm=train_cfg.h_max_mm,
    )


def _write_generated(out_dir, generated, spacing):
    from .nifti import write_nifti

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_nifti(out_dir / "gen.nii.gz", generated.reassembled_ct.astype(np.float32), spacing)
    write_nifti(out_dir / "gen_seg.nii.gz", generated.gen_seg.astype(np.int16), spacing)
    provenance = {
        "target": generated.target,
        "mode": generated.provenance["mode"],
        "neighbors": generated.provenance["neighbors"],
        "replaced_rows": {str(k): list(v) for k, v in generated.provenance["replaced_rows"].items()},
        "h_pred_mm": generated.h_pred_mm,
        "h_pred_slices": [float(h) for h in generated.h_pred_slices],
    }
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))


def stage_synthesize(config, case_dir, ckpt_path, clf_path, target, mode, out_dir):
    synth = _case_synthesizer(case_dir, ckpt_path, clf_path)
    generated = synth.synthesize(target, mode=mode)
    _write_generated(out_dir, generated, synth.spacing)
    return generated, synth


def stage_quantify(case_dir, gen_root, out_csv, heatmaps=False):
    """RHLV rows for every synthesis output found under ``gen_root``."""
    from .nifti import read_nifti
    from .phantom import read_case
    from .preprocess import remove_pedicles, straighten_spine
    from .quantification import (
        column_height_field, compute_rhlv, export_heatmap_curve, write_rhlv_csv,
    )

    case_dir = Path(case_dir)
    gen_root = Path(gen_root)
    prov_files = sorted(gen_root.rglob("provenance.json"))
    if not prov_files:
        raise MissingArtifact(f"missing upstream artifact: synthesis outputs under {gen_root}")
    vol, labels, meta = read_case(case_dir)
    _, labels_s = straighten_spine(vol, labels)
    body = remove_pedicles(labels_s).labels

    from .quantification import QuantError

    rows = []
    case_id = meta.case_id or case_dir.name
    for prov_file in prov_files:
        prov = json.loads(prov_file.read_text())
        gen_seg, spacing = read_nifti(prov_file.parent / "gen_seg.nii.gz")
        try:
            gen_field = column_height_field(gen_seg > 0, spacing)
            ori_field = column_height_field(body.data == prov["target"], spacing)
            rec = compute_rhlv(gen_field, ori_field, vertebra=prov["target"], mode=prov["mode"])
        except QuantError as e:
            print(f"warning: skipping {case_id} vertebra {prov['target']}: {e}", file=sys.stderr)
            continue
        rows.append((case_id, rec))
        if heatmaps:
            export_heatmap_curve(
                gen_field, ori_field, prov_file.parent, prefix=f"vert_{prov['target']:02d}"
            )
    write_rhlv_csv(out_csv, rows)
    return rows


def _grade_labels_for(rhlv_rows, cases_root):
    from .phantom import read_case

    metas = {}
    for cdir in case_dirs(cases_root):
        _, _, meta = read_case(cdir)
        metas[meta.case_id or cdir.name] = meta
    labels = []
    for case_id, rec in rhlv_rows:
        if case_id not in metas:
            raise DataError(f"rhlv row references unknown case {case_id}")
        labels.append(metas[case_id].vertebra(rec.vertebra).genant_grade)
    return np.array(labels)


def stage_grade_train(config, rhlv_csv, cases_root, out_model, report_path=None):
    from .grading import save_svm, train_svm
    from .quantification import read_rhlv_csv

    if not Path(rhlv_csv).exists():
        raise MissingArtifact(f"missing upstream artifact: rhlv csv {rhlv_csv}")
    rows = read_rhlv_csv(rhlv_csv)
    labels = _grade_labels_for(rows, cases_root)
    section = config["grading"]
    try:
        model, report = train_svm(
            [rec for _, rec in rows], labels,
            folds=section["folds"], feature_set=section["features"], seed=section["seed"],
        )
    except Exception as e:
        raise DataError(f"SVM training failed: {e}") from e
    save_svm(out_model, model)
    if report_path:
        Path(report_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return model, report


def stage_grade_predict(model_path, rhlv_csv, out_csv):
    import csv

    from .grading import load_svm, predict_grade
    from .quantification import read_rhlv_csv

    if not Path(model_path).exists():
        raise MissingArtifact(f"missing upstream artifact: svm model {model_path}")
    if not Path(rhlv_csv).exists():
        raise MissingArtifact(f"missing upstream artifact: rhlv csv {rhlv_csv}")
    model = load_svm(model_path)
    rows = read_rhlv_csv(rhlv_csv)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "vertebra", "pred_grade"])
        for case_id, rec in rows:
            writer.writerow([case_id, rec.vertebra, predict_grade(model, rec)])
    return out_csv


def stage_eval(pred_csv, cases_root, out_json=None):
    import csv

    from .grading import classification_metrics
    from .phantom import read_case

    if not Path(pred_csv).exists():
        raise MissingArtifact(f"missing upstream artifact: predictions {pred_csv}")
    metas = {}
    for cdir in case_dirs(cases_root):
        _, _, meta = read_case(cdir)
        metas[meta.case_id or cdir.name] = meta
    preds, labels = [], []
    with open(pred_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            meta = metas.get(row["case_id"])
            if meta is None:
                raise DataError(f"prediction references unknown case {row['case_id']}")
            preds.append(int(row["pred_grade"]))
            labels.append(meta.vertebra(int(row["vertebra"])).genant_grade)
    report = classification_metrics(preds, labels)
    if out_json:
        Path(out_json).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return report


def stage_pipeline(config, out_dir):
    """phantom -> preprocess -> hgam-train -> train -> synthesize -> quantify
    -> grade -> eval -> summary.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stage = "phantom"
    try:
        cases = stage_phantom(config, out_dir / "cases")

        stage = "preprocess"
        for cdir in cases:
            stage_preprocess(config, cdir, out_dir / "prep" / cdir.name)

        stage = "hgam-train"
        clf_path = out_dir / "clf.ckpt"
        stage_hgam_train(config, out_dir / "cases", clf_path)

        stage = "train"
        result = stage_train(config, out_dir / "prep", clf_path, out_dir / "ckpt")
        ckpt = result.best_checkpoint or result.last_checkpoint

        stage = "synthesize"
        mode = config["synthesis"]["mode"]
        gen_metrics = []
        for cdir in cases:
            synth = _case_synthesizer(cdir, ckpt, clf_path)
            for v in synth.meta.vertebrae:
                generated = synth.synthesize(v.label, mode=mode)
                _write_generated(
                    out_dir / "gen" / cdir.name / f"vert_{v.label:02d}",
                    generated, synth.spacing,
                )
                if v.genant_grade == 0:
                    gen_metrics.append(_generation_metrics(generated, synth))

        stage = "quantify"
        all_rows = []
        for cdir in cases:
            rows = stage_quantify(cdir, out_dir / "gen" / cdir.name,
                                  out_dir / "gen" / cdir.name / "rhlv.csv")
            all_rows.extend(rows)
        from .quantification import write_rhlv_csv

        write_rhlv_csv(out_dir / "rhlv.csv", all_rows)

        stage = "grade"
        model, cv_report = stage_grade_train(
            config, out_dir / "rhlv.csv", out_dir / "cases", out_dir / "svm.json",
            out_dir / "cv_report.json",
        )
        stage_grade_predict(out_dir / "svm.json", out_dir / "rhlv.csv", out_dir / "preds.csv")

        stage = "eval"
        report = stage_eval(out_dir / "preds.csv", out_dir / "cases", out_dir / "report.json")
    except CliError:
        raise
    except Exception as e:
        raise CliError(f"stage {stage} failed: {e}") from e

    summary = {
        "config_hash": config_hash(config),
        "n_cases": len(cases),
        "synthesis_mode": mode,
        "generation": {
            "rhdr_healthy_mean_pct": float(np.mean([m["rhdr_proxy"] for m in gen_metrics]))
            if gen_metrics else None,
            "psnr_mean": float(np.mean([m["psnr"] for m in gen_metrics])) if gen_metrics else None,
            "ssim_mean": float(np.mean([m["ssim"] for m in gen_metrics])) if gen_metrics else None,
            "dice_mean": float(np.mean([m["dice"] for m in gen_metrics])) if gen_metrics else None,
        },
        "classification_cv": cv_report.to_dict(),
        "classification_eval": report.to_dict(),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _generation_metrics(generated, synth):
    """Masked-restoration quality of a healthy target: image metrics over the
    replaced window plus the height-ratio proxy."""
    from .grading import dice, psnr, ssim
    from .quantification import column_height_field, compute_rhdr

    u0, u1 = generated.provenance["replaced_rows"][generated.target]
    body = synth.observed_body(generated.target)
    zs = np.nonzero(body.any(axis=(0, 1)))[0]
    z = int(zs.mean())
    gen_slice = generated.reassembled_ct[u0:u1, :, z]
    ref_slice = synth.nvol.data[u0:u1, :, z]
    gen_field = column_height_field(generated.gen_seg, synth.spacing)
    ori_field = column_height_field(body, synth.spacing)
    return {
        "psnr": psnr(gen_slice, ref_slice),
        "ssim": ssim(gen_slice, ref_slice),
        "dice": dice(generated.gen_seg, body),
        "rhdr_proxy": compute_rhdr(gen_field, ori_field),
    }


# -- argument parsing ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vertsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic spine cases")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--balanced", action="store_true", default=None)

    p = sub.add_parser("preprocess", help="build masked canvases for one case")
    p.add_argument("--config")
    p.add_argument("--case", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--h-max", type=float)
    p.add_argument("--patch-size", type=int)

    p = sub.add_parser("hgam-train", help="train the fracture-attention classifier")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the inpainting generator")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="preprocessed canvases root")
    p.add_argument("--clf", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("synthesize", help="generate a pseudo-healthy vertebra")
    p.add_argument("--config")
    p.add_argument("--case", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clf", required=True)
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--mode", choices=["one_step", "two_step", "continuous"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantify", help="RHLV/RHDR from synthesis outputs")
    p.add_argument("--case", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmaps", action="store_true")

    p = sub.add_parser("grade", help="severity grading")
    gsub = p.add_subparsers(dest="grade_command", required=True)
    g = gsub.add_parser("train-svm")
    g.add_argument("--config")
    g.add_argument("--rhlv", required=True)
    g.add_argument("--labels", required=True, help="cases root with meta.json ground truth")
    g.add_argument("--folds", type=int)
    g.add_argument("--features")
    g.add_argument("--out", required=True)
    g.add_argument("--report")
    g = gsub.add_parser("predict")
    g.add_argument("--model", required=True)
    g.add_argument("--rhlv", required=True)
    g.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare predictions to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["one_step", "two_step", "continuous"])
    p.add_argument("--h-max", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0

    try:
        config = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            for section in ("phantom", "hgam", "train", "grading"):
                config[section]["seed"] = args.seed
        if getattr(args, "h_max", None) is not None:
            config["preprocess"]["h_max_mm"] = args.h_max
        if getattr(args, "patch_size", None) is not None:
            config["preprocess"]["patch_size"] = args.patch_size
        if getattr(args, "mode", None) is not None:
            config["synthesis"]["mode"] = args.mode

        if args.command == "phantom":
            written = stage_phantom(config, args.out, args.n_cases, args.seed, args.balanced)
            print(f"wrote {len(written)} cases under {args.out}")
        elif args.command == "preprocess":
            stage_preprocess(config, args.case, args.out)
            print(f"wrote canvases under {args.out}")
        elif args.command == "hgam-train":
            bundle = stage_hgam_train(config, args.data, args.out)
            print(f"classifier holdout accuracy {bundle.holdout_accuracy:.3f} -> {args.out}")
        elif args.command == "train":
            result = stage_train(config, args.data, args.clf, args.out)
            print(f"trained {len(result.epoch_means)} epochs; "
                  f"final mean generator loss {result.epoch_means[-1]:.4f}")
        elif args.command == "synthesize":
            generated, _ = stage_synthesize(
                config, args.case, args.ckpt, args.clf, args.target,
                config["synthesis"]["mode"], args.out,
            )
            print(f"restored vertebra {args.target}: height {generated.h_pred_mm:.1f} mm")
        elif args.command == "quantify":
            rows = stage_quantify(args.case, args.gen, args.out, args.heatmaps)
            print(f"wrote {len(rows)} RHLV rows to {args.out}")
        elif args.command == "grade":
            if args.grade_command == "train-svm":
                if args.folds is not None:
                    config["grading"]["folds"] = args.folds
                if args.features is not None:
                    config["grading"]["features"] = args.features
                _, report = stage_grade_train(config, args.rhlv, args.labels, args.out, args.report)
                print(f"cv macro-F1 {report.macro_f1:.3f} -> {args.out}")
            else:
                stage_grade_predict(args.model, args.rhlv, args.out)
                print(f"wrote predictions to {args.out}")
        elif args.command == "eval":
            report = stage_eval(args.pred, args.gt, args.out)
            print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        elif args.command == "pipeline":
            summary = stage_pipeline(config, args.out)
            print(json.dumps(summary["classification_eval"], indent=2, sort_keys=True))
            print(f"summary written to {Path(args.out) / 'summary.json'}")
        return EXIT_OK
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - safety net
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
