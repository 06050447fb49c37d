"""Clean and adversarial accuracy, robustness curves and report emission."""
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import classifiers as clf_lib
from .attack import NO_ACTIVE_CAPSULE, read_records, run_evasion_attack, write_records
from .config import AttackConfig, EvalConfig
from .data import batches
from .model import encode_presences

TABLE_FIELDS = ("classifier", "regime", "dataset", "clean_acc", "adv_acc")
CLASSIFIER_SOURCES = {"prior_kmeans": "prior", "posterior_kmeans": "posterior", "prior": "prior",
                      "posterior": "posterior"}


@torch.no_grad()
def encode_dataset(model, dataset, batch_size=500):
    """Deterministic ``(prior [N, K], reduced posterior [N, K])`` numpy features of a dataset."""
    model.eval()
    priors, posts = [], []
    for batch in batches(dataset, batch_size):
        prior, post = encode_presences(model, torch.from_numpy(batch.images))
        priors.append(prior.numpy())
        posts.append(clf_lib.reduce_posterior(post).numpy())
    return np.concatenate(priors), np.concatenate(posts)


def fit_classifiers(model, dataset, seed=0, linear_epochs=50, linear_lr=0.1):
    """Fit the prior and posterior k-means classifiers and the posterior linear head on ``dataset``."""
    prior, post = encode_dataset(model, dataset)
    return {
        "prior_kmeans": clf_lib.fit_kmeans_classifier(prior, dataset.labels, seed=seed, source="prior"),
        "posterior_kmeans": clf_lib.fit_kmeans_classifier(post, dataset.labels, seed=seed, source="posterior"),
        "posterior_linear": clf_lib.train_linear(post, dataset.labels, epochs=linear_epochs, lr=linear_lr),
    }


def evaluate_clean(model, classifier, dataset):
    """Fraction of ``dataset`` the classifier labels correctly from the model's encodings."""
    if classifier is None:
        raise clf_lib.NotFittedError("classifier is not fitted")
    prior, post = encode_dataset(model, dataset)
    pred = clf_lib.predict(classifier, prior, post)
    return clf_lib.accuracy(pred, dataset.labels)


def adversarial_accuracy(records, threshold):
    """A sample is correct unless the attack succeeded within ``threshold``; otherwise its clean outcome counts."""
    if not records:
        return float("nan")
    correct = 0
    for r in records:
        broken = r["success"] and r["status"] != NO_ACTIVE_CAPSULE and r["l2_norm"] <= threshold
        if not broken and r["predicted_label"] == r["clean_label"]:
            correct += 1
    return correct / len(records)


def sample_attack_indices(n_total, n, seed):
    if n > n_total:
        raise ValueError(f"cannot draw {n} attack samples from {n_total}")
    return np.sort(np.random.default_rng(seed).choice(n_total, size=n, replace=False))


def evaluate_adversarial(model, classifier, dataset, attack_cfg=None, eval_cfg=None, seed=0,
                         batch_size=50, records_path=None, progress=None):
    """Attack ``n_attack_samples`` test images; returns ``(accuracy at the threshold, records)``."""
    attack_cfg = attack_cfg or AttackConfig.evaluation()
    eval_cfg = (eval_cfg or EvalConfig()).validate()
    idx = sample_attack_indices(len(dataset), eval_cfg.n_attack_samples, seed)
    records = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        results = run_evasion_attack(
            torch.from_numpy(dataset.images[chunk]), model, classifier, attack_cfg,
            sample_ids=chunk, labels=dataset.labels[chunk], seed=seed)
        records.extend(r.record() for r in results)
        if progress:
            progress(len(records), len(idx))
    if records_path is not None:
        write_records(records, records_path)
        records = read_records(records_path)
    return adversarial_accuracy(records, eval_cfg.l2_threshold), records


@dataclass
class RobustnessCurve:
    points: list  # [(threshold, accuracy)], thresholds increasing
    model_id: str = ""
    classifier_id: str = ""

    @property
    def thresholds(self):
        return [t for t, _ in self.points]

    @property
    def accuracies(self):
        return [a for _, a in self.points]


def robustness_curve(records, thresholds, model_id="", classifier_id=""):
    """Accuracy at each threshold from one set of minimal-norm attack records."""
    grid = sorted(float(t) for t in thresholds)
    return RobustnessCurve([(t, adversarial_accuracy(records, t)) for t in grid], model_id, classifier_id)


def clean_accuracy_of_records(records):
    return sum(r["predicted_label"] == r["clean_label"] for r in records) / len(records)


@dataclass
class EvalResult:
    classifier: str
    regime: str
    dataset: str
    clean_acc: float
    adv_acc: float
    curve: RobustnessCurve = field(default=None)


def _fmt(v):
    return f"{v:.6f}"


def write_table(results, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_FIELDS)
        for r in results:
            writer.writerow([r.classifier, r.regime, r.dataset, _fmt(r.clean_acc), _fmt(r.adv_acc)])
    return path


def write_curve(curve, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "classifier", "threshold", "accuracy"))
        for t, a in curve.points:
            writer.writerow([curve.model_id, curve.classifier_id, _fmt(t), _fmt(a)])
    return path


def read_curve(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    model_id = rows[0]["model"] if rows else ""
    classifier_id = rows[0]["classifier"] if rows else ""
    return RobustnessCurve([(float(r["threshold"]), float(r["accuracy"])) for r in rows], model_id, classifier_id)


def plot_curves(curves, path, threshold=None, title=None):
    """Render accuracy-vs-threshold curves to an image file; returns the plotted data."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    plotted = []
    for curve in curves:
        label = " / ".join(s for s in (curve.model_id, curve.classifier_id) if s) or None
        (line,) = ax.plot(curve.thresholds, [100 * a for a in curve.accuracies], label=label)
        plotted.append((list(line.get_xdata()), [v / 100 for v in line.get_ydata()]))
    if threshold is not None:
        ax.axvline(threshold, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("L2 perturbation threshold")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    if any(c.model_id or c.classifier_id for c in curves):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)
    return plotted


def emit_report(results, out_dir, threshold=None):
    """Write ``table.csv``, one curve CSV and PNG per result, and a combined curve plot."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    files = [write_table(results, out / "table.csv")]
    curves = []
    for r in results:
        if r.curve is None:
            continue
        stem = f"curve_{r.regime}_{r.classifier}_{r.dataset}"
        files.append(write_curve(r.curve, out / f"{stem}.csv"))
        plot_curves([r.curve], out / f"{stem}.png", threshold)
        files.append(out / f"{stem}.png")
        curves.append(r.curve)
    if curves:
        plot_curves(curves, out / "curves.png", threshold)
        files.append(out / "curves.png")
    return files
