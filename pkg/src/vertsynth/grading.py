"""Severity grading from height-loss features: a one-vs-rest linear SVM
with stratified cross-validation, the classification metric suite
(macro-P/R/F1 plus the fractured-vs-intact binary collapse), and image
quality metrics (PSNR, SSIM, Dice).

The fitted model is stored as plain arrays (standardisation + per-class
weights), so prediction is an argmax over linear scores and the model file
is a small JSON document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

GRADE_CLASSES = (0, 1, 2, 3)
FEATURE_TOKENS = ("segs", "avg", "hminmax")


class GradingError(ValueError):
    pass


def feature_matrix(records, feature_set="segs"):
    """Build the feature matrix from RHLV records.

    ``feature_set`` is a token or '+'-joined combination of: ``segs`` (the
    anterior/middle/posterior triple), ``avg`` (overall loss), ``hminmax``
    (min/max ratio of the observed segment heights; needs segment heights,
    so it is unavailable for records re-read from rhlv.csv).
    """
    if isinstance(feature_set, str):
        tokens = tuple(t for t in feature_set.split("+") if t)
    else:
        tokens = tuple(feature_set)
    for t in tokens:
        if t not in FEATURE_TOKENS:
            raise GradingError(f"unknown feature token {t!r}")
    if not tokens:
        raise GradingError("empty feature set")

    columns, names = [], []
    for t in tokens:
        if t == "segs":
            columns.append([[r.rhlv_anterior, r.rhlv_middle, r.rhlv_posterior] for r in records])
            names += ["rhlv_anterior", "rhlv_middle", "rhlv_posterior"]
        elif t == "avg":
            columns.append([[r.rhlv_avg] for r in records])
            names += ["rhlv_avg"]
        else:
            for r in records:
                if not r.h_ori_segments:
                    raise GradingError(
                        "hminmax features need segment heights; rhlv.csv rows do not carry them"
                    )
            columns.append(
                [[min(r.h_ori_segments) / max(max(r.h_ori_segments), 1e-9)] for r in records]
            )
            names += ["h_min_over_h_max"]
    X = np.concatenate([np.asarray(c, dtype=float) for c in columns], axis=1)
    return X, names


@dataclass
class SvmModel:
    weights: np.ndarray        # (n_classes, n_features)
    biases: np.ndarray         # (n_classes,)
    classes: list
    feature_names: list
    mean: np.ndarray
    std: np.ndarray

    def scores(self, X):
        Xs = (np.atleast_2d(X) - self.mean) / self.std
        return Xs @ self.weights.T + self.biases

    def predict(self, X):
        return np.asarray(self.classes)[np.argmax(self.scores(X), axis=1)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "weights": self.weights.tolist(),
                "biases": self.biases.tolist(),
                "classes": list(map(int, self.classes)),
                "feature_names": self.feature_names,
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str):
        p = json.loads(text)
        return cls(
            weights=np.array(p["weights"]),
            biases=np.array(p["biases"]),
            classes=p["classes"],
            feature_names=p["feature_names"],
            mean=np.array(p["mean"]),
            std=np.array(p["std"]),
        )


def save_svm(path, model: SvmModel) -> None:
    Path(path).write_text(model.to_json())


def load_svm(path) -> SvmModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing SVM model: {path}")
    return SvmModel.from_json(path.read_text())


@dataclass
class MetricReport:
    confusion: np.ndarray       # 4x4 over grades 0..3
    macro_precision: float
    macro_recall: float
    macro_f1: float
    binary_accuracy: float
    binary_sensitivity: float
    binary_f1: float
    n: int
    image_metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "confusion": self.confusion.tolist(),
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "binary_accuracy": self.binary_accuracy,
            "binary_sensitivity": self.binary_sensitivity,
            "binary_f1": self.binary_f1,
            "n": self.n,
            "image_metrics": self.image_metrics,
        }


def classification_metrics(preds, labels) -> MetricReport:
    """Four-class confusion/macro metrics plus the binary collapse
    (fractured = grades 1-3). Macro means run over classes present in the
    labels; a present class never predicted scores precision 0."""
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if len(preds) != len(labels):
        raise GradingError("prediction/label length mismatch")
    if len(preds) == 0:
        raise GradingError("empty input")

    confusion = np.zeros((4, 4), dtype=int)
    for p, t in zip(preds, labels):
        confusion[t, p] += 1

    present = sorted(set(labels.tolist()))
    precisions, recalls, f1s = [], [], []
    for c in present:
        tp = confusion[c, c]
        col = confusion[:, c].sum()
        row = confusion[c, :].sum()
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)

    b_pred = (preds > 0).astype(int)
    b_true = (labels > 0).astype(int)
    tp = int(((b_pred == 1) & (b_true == 1)).sum())
    tn = int(((b_pred == 0) & (b_true == 0)).sum())
    fp = int(((b_pred == 1) & (b_true == 0)).sum())
    fn = int(((b_pred == 0) & (b_true == 1)).sum())
    sens = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    return MetricReport(
        confusion=confusion,
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
        binary_accuracy=(tp + tn) / len(preds),
        binary_sensitivity=sens,
        binary_f1=2 * prec * sens / (prec + sens) if prec + sens else 0.0,
        n=len(preds),
    )


def _mean_report(reports):
    return MetricReport(
        confusion=np.sum([r.confusion for r in reports], axis=0),
        macro_precision=float(np.mean([r.macro_precision for r in reports])),
        macro_recall=float(np.mean([r.macro_recall for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        binary_accuracy=float(np.mean([r.binary_accuracy for r in reports])),
        binary_sensitivity=float(np.mean([r.binary_sensitivity for r in reports])),
        binary_f1=float(np.mean([r.binary_f1 for r in reports])),
        n=int(np.sum([r.n for r in reports])),
    )


def _fit_linear_svm(X, y, seed):
    # Joint multiclass hinge (Crammer-Singer): per-class scores are trained
    # together, so ordered severity bands along one morphology direction stay
    # separable where independently-fit one-vs-rest binaries cannot be
    # (the middle grades sit between grade 0 and grade 3 on each direction).
    from sklearn.svm import LinearSVC

    svc = LinearSVC(C=1.0, multi_class="crammer_singer", class_weight="balanced",
                    max_iter=50000, random_state=seed)
    svc.fit(X, y)
    classes = svc.classes_.tolist()
    if svc.coef_.shape[0] == 1 and len(classes) == 2:
        w = np.vstack([-svc.coef_[0], svc.coef_[0]])
        b = np.array([-float(svc.intercept_[0]), float(svc.intercept_[0])])
    else:
        w, b = svc.coef_.copy(), svc.intercept_.copy()
    return w, b, classes


def train_svm(records, labels, folds: int = 5, feature_set="segs", seed: int = 0):
    """Stratified k-fold CV followed by a refit on all data.

    Returns ``(SvmModel, MetricReport)`` where the report carries the mean
    CV metrics.
    """
    from sklearn.model_selection import StratifiedKFold

    X, names = feature_matrix(records, feature_set)
    y = np.asarray(labels, dtype=int)
    if len(X) != len(y):
        raise GradingError("records/labels length mismatch")
    if len(np.unique(y)) < 2:
        raise GradingError("need at least two classes to train")
    if len(X) < folds:
        raise GradingError(f"{len(X)} samples cannot fill {folds} folds")

    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    reports = []
    for train_idx, val_idx in skf.split(X, y):
        mean = X[train_idx].mean(axis=0)
        std = X[train_idx].std(axis=0)
        std[std < 1e-9] = 1.0
        w, b, classes = _fit_linear_svm((X[train_idx] - mean) / std, y[train_idx], seed)
        fold_model = SvmModel(w, b, classes, names, mean, std)
        reports.append(classification_metrics(fold_model.predict(X[val_idx]), y[val_idx]))

    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-9] = 1.0
    w, b, classes = _fit_linear_svm((X - mean) / std, y, seed)
    return SvmModel(w, b, classes, names, mean, std), _mean_report(reports)


def predict_grade(model: SvmModel, record, feature_set=None) -> int:
    """Grade one RHLV record with a fitted model."""
    feature_set = feature_set or _infer_feature_set(model.feature_names)
    X, names = feature_matrix([record], feature_set)
    if names != model.feature_names:
        raise GradingError(f"feature mismatch: model has {model.feature_names}, got {names}")
    return int(model.predict(X)[0])


def _infer_feature_set(names):
    tokens = []
    if "rhlv_anterior" in names:
        tokens.append("segs")
    if "rhlv_avg" in names:
        tokens.append("avg")
    if "h_min_over_h_max" in names:
        tokens.append("hminmax")
    return "+".join(tokens)


# -- image metrics ---------------------------------------------------------------

def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=float) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def psnr(gen: np.ndarray, real: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE); infinity when the images are identical."""
    gen, real = np.asarray(gen, dtype=float), np.asarray(real, dtype=float)
    if gen.shape != real.shape:
        raise GradingError("shape mismatch")
    mse = float(np.mean((gen - real) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)


def ssim(gen: np.ndarray, real: np.ndarray, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03, size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity with the standard Gaussian window."""
    gen, real = np.asarray(gen, dtype=float), np.asarray(real, dtype=float)
    if gen.shape != real.shape:
        raise GradingError("shape mismatch")
    kernel = _gaussian_kernel(size, sigma)
    blur = lambda a: ndimage.correlate(a, kernel, mode="reflect")
    mu_x, mu_y = blur(gen), blur(real)
    sxx = blur(gen * gen) - mu_x * mu_x
    syy = blur(real * real) - mu_y * mu_y
    sxy = blur(gen * real) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def dice(gen_seg, real_seg) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as identical."""
    a = np.asarray(gen_seg).astype(bool)
    b = np.asarray(real_seg).astype(bool)
    if a.shape != b.shape:
        raise GradingError("shape mismatch")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def image_metrics(gen, real, gen_seg, real_seg):
    """(PSNR, SSIM, Dice) for one generated/reference pair."""
    return psnr(gen, real), ssim(gen, real), dice(gen_seg, real_seg)


# -- continuous-fracture stratification --------------------------------------------

def max_consecutive_fracture_run(meta) -> int:
    """Longest run of adjacent fractured vertebrae in a case."""
    order = sorted(v.label for v in meta.vertebrae)
    fractured = {v.label for v in meta.vertebrae if v.genant_grade > 0}
    best = run = 0
    for label in order:
        run = run + 1 if label in fractured else 0
        best = max(best, run)
    return best


def filter_by_fracture_run(rows, metas, min_run: int):
    """Keep (case_id, record, label) rows whose case has a fracture run of
    at least ``min_run`` (report stratification for continuous fractures)."""
    eligible = {cid for cid, meta in metas.items() if max_consecutive_fracture_run(meta) >= min_run}
    return [row for row in rows if row[0] in eligible]
