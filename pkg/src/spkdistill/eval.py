"""Diagnostics on trained encoders: linear probes, noise separability,
clean/noisy embedding similarity and cross-run reports."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import grad as G
from .errors import ConfigError, IoError, ManifestError, StratificationError
from .grad import AdamState, ParamSet, Tensor


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    std: float
    n_folds: int
    n_classes: int
    chance: float
    hidden_dim: int
    fold_accuracies: tuple = ()


@dataclass(frozen=True)
class SeparabilityResult:
    f_score: float
    precision: float
    recall: float
    held_out: str


@dataclass
class SimilarityResult:
    same_mean: float
    diff_mean: float
    gap: float
    per_speaker: dict
    same_scores: np.ndarray = field(repr=False)
    diff_scores: np.ndarray = field(repr=False)
    eer: float = float("nan")


# ---------------------------------------------------------------- probes

def stratified_folds(labels: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample; each class is dealt round-robin after a shuffle."""
    fold = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return fold


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, sd = train.mean(axis=0), train.std(axis=0) + 1e-8
    return (train - mu) / sd, (test - mu) / sd


def train_two_layer(
    x: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    hidden_dim: int,
    rng: np.random.Generator,
    lr: float = 1e-2,
    max_epochs: int = 1000,
    tol: float = 1e-6,
) -> ParamSet:
    """Two stacked linear layers, softmax cross-entropy, full-batch Adam."""
    params = ParamSet()
    d = x.shape[1]
    params.add("l0.W", rng.normal(0, 1 / np.sqrt(d), (d, hidden_dim)))
    params.add("l0.b", np.zeros(hidden_dim))
    params.add("l1.W", rng.normal(0, 1 / np.sqrt(hidden_dim), (hidden_dim, n_classes)))
    params.add("l1.b", np.zeros(n_classes))
    onehot = Tensor(np.eye(n_classes)[y])
    xt = Tensor(x)
    state = AdamState.for_params(params)
    prev = np.inf
    for _ in range(max_epochs):
        params.zero_grad()
        loss = G.cross_entropy_from_probs(onehot, G.log_softmax(_two_layer(params, xt)))
        loss.backward()
        G.adam_step(params, None, state, lr)
        if abs(prev - float(loss.data)) < tol:
            break
        prev = float(loss.data)
    return params


def _two_layer(params: ParamSet, x: Tensor) -> Tensor:
    h = G.linear(x, params["l0.W"], params["l0.b"])
    return G.linear(h, params["l1.W"], params["l1.b"])


def linear_probe(
    embeddings, labels, n_folds: int = 5, hidden_dim: int = 16, seed: int = 0, max_epochs: int = 1000
) -> ProbeResult:
    """k-fold stratified accuracy of a two-linear-layer classifier."""
    x = np.asarray(embeddings, dtype=np.float64)
    raw = np.asarray(labels)
    classes, y = np.unique(raw, return_inverse=True)
    if len(x) < n_folds:
        raise ConfigError(f"{len(x)} samples cannot fill {n_folds} folds")
    if len(classes) < 2:
        raise StratificationError("need at least two classes")
    rng = np.random.default_rng(seed)
    fold = stratified_folds(y, n_folds, rng)
    accs = []
    for k in range(n_folds):
        tr, te = fold != k, fold == k
        if len(np.unique(y[tr])) < len(classes):
            raise StratificationError(f"a class is missing from training fold {k}")
        xtr, xte = _standardize(x[tr], x[te])
        params = train_two_layer(xtr, y[tr], len(classes), hidden_dim, rng, max_epochs=max_epochs)
        pred = _two_layer(params, Tensor(xte)).data.argmax(axis=1)
        accs.append(float(np.mean(pred == y[te])))
    chance = float(np.bincount(y).max() / len(y))
    return ProbeResult(float(np.mean(accs)), float(np.std(accs)), n_folds, len(classes), chance, hidden_dim, tuple(accs))


# ---------------------------------------------------------- separability

def separability_features(frames, units, k_units: int) -> np.ndarray:
    """Mean feature frame concatenated with the normalised unit histogram."""
    frames = np.asarray(frames, dtype=np.float64)
    hist = np.bincount(np.asarray(units, dtype=np.int64), minlength=k_units).astype(np.float64)
    return np.concatenate([frames.mean(axis=0), hist / max(hist.sum(), 1.0)])


def fit_logistic(x: np.ndarray, y: np.ndarray, alpha: float = 10.0) -> np.ndarray:
    """Class-balanced logistic regression with ridge penalty ``alpha/2 |w|^2``.

    Sample weights sum to one, so ``alpha`` does not scale with N. Returns
    ``[w, b]``.
    """
    w_pos = 0.5 / max(np.mean(y), 1e-12)
    w_neg = 0.5 / max(np.mean(1 - y), 1e-12)
    sw = np.where(y == 1, w_pos, w_neg) / len(y)

    def obj(theta):
        w, b = theta[:-1], theta[-1]
        z = x @ w + b
        # log(1 + e^z) - y z, stably
        loss = np.sum(sw * (np.logaddexp(0.0, z) - y * z)) + 0.5 * alpha * (w @ w)
        r = sw * (0.5 * (1.0 + np.tanh(0.5 * z)) - y)
        return loss, np.concatenate([x.T @ r + alpha * w, [r.sum()]])

    res = minimize(obj, np.zeros(x.shape[1] + 1), jac=True, method="L-BFGS-B")
    return res.x


def _f_score(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, float]:
    tp = float(np.sum((y_pred == 1) & (y_true == 1)))
    fp = float(np.sum((y_pred == 1) & (y_true == 0)))
    fn = float(np.sum((y_pred == 0) & (y_true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f, precision, recall


def noise_separability(
    features,
    noise_labels,
    held_out_condition: str,
    clean_label: str = "clean",
    n_hist: int = 0,
    alpha: float = 10.0,
) -> SeparabilityResult:
    """Clean-vs-noisy F-score on a noise condition never seen in training.

    ``features`` is one vector per record (see :func:`separability_features`);
    the trailing ``n_hist`` columns are histogram proportions and are left
    unscaled, since standardising sparse bins blows up rare units. The other
    columns are standardised with training statistics. Clean records are
    split across conditions by a content hash so the result does not depend
    on record order.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray([str(c) for c in noise_labels])
    conditions = sorted({str(c) for c in labels} - {clean_label})
    if len(conditions) < 2:
        raise ConfigError("need at least two noise conditions for leave-one-condition-out")
    if held_out_condition not in conditions:
        raise ConfigError(f"unknown condition {held_out_condition!r}")
    if not np.any(labels == clean_label):
        raise ConfigError("no clean records")
    keys = np.array([zlib.crc32(np.ascontiguousarray(row).tobytes()) for row in x], dtype=np.int64)
    order = np.lexsort((labels, keys))
    x, labels, keys = x[order], labels[order], keys[order]
    clean_fold = keys % len(conditions)
    held = conditions.index(held_out_condition)
    is_clean = labels == clean_label
    test = (labels == held_out_condition) | (is_clean & (clean_fold == held))
    train = ~test
    y = (~is_clean).astype(np.float64)
    dense = x.shape[1] - n_hist
    xtr, xte = x[train].copy(), x[test].copy()
    xtr[:, :dense], xte[:, :dense] = _standardize(xtr[:, :dense], xte[:, :dense])
    theta = fit_logistic(xtr, y[train], alpha)
    pred = (xte @ theta[:-1] + theta[-1] > 0).astype(int)
    f, p, r = _f_score(y[test].astype(int), pred)
    return SeparabilityResult(f, p, r, held_out_condition)


def leave_one_condition_out(features, noise_labels, clean_label: str = "clean", **kw) -> dict:
    conds = sorted({str(c) for c in noise_labels} - {clean_label})
    return {c: noise_separability(features, noise_labels, c, clean_label, **kw) for c in conds}


# ------------------------------------------------------------ similarity

def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def equal_error_rate(target: np.ndarray, nontarget: np.ndarray) -> float:
    scores = np.concatenate([target, nontarget])
    is_target = np.concatenate([np.ones(len(target)), np.zeros(len(nontarget))])
    order = np.argsort(-scores, kind="stable")
    is_target = is_target[order]
    fnr = 1.0 - np.cumsum(is_target) / max(len(target), 1)
    fpr = np.cumsum(1 - is_target) / max(len(nontarget), 1)
    i = int(np.argmin(np.abs(fnr - fpr)))
    return float((fnr[i] + fpr[i]) / 2)


def cross_condition_similarity(emb_clean, speakers_clean, emb_noisy, speakers_noisy) -> SimilarityResult:
    """Cosine between clean and noisy embeddings, same vs different speaker.

    ``gap`` is the mean same-speaker cosine minus the mean different-speaker
    cosine.
    """
    a, b = _unit_rows(np.asarray(emb_clean, float)), _unit_rows(np.asarray(emb_noisy, float))
    sa, sb = np.asarray(speakers_clean), np.asarray(speakers_noisy)
    if set(sa.tolist()) != set(sb.tolist()):
        raise ManifestError("clean and noisy sets must cover the same speakers")
    if len(set(sa.tolist())) < 2:
        raise ManifestError("need at least two speakers")
    cos = a @ b.T
    same = sa[:, None] == sb[None, :]
    per_speaker = {}
    for s in sorted(set(sa.tolist())):
        rows, cols = sa == s, sb == s
        per_speaker[s] = {
            "same": float(cos[np.ix_(rows, cols)].mean()),
            "diff": float(cos[np.ix_(rows, ~cols)].mean()),
        }
    same_scores, diff_scores = cos[same], cos[~same]
    same_mean, diff_mean = float(same_scores.mean()), float(diff_scores.mean())
    return SimilarityResult(
        same_mean,
        diff_mean,
        same_mean - diff_mean,
        per_speaker,
        same_scores,
        diff_scores,
        equal_error_rate(same_scores, diff_scores),
    )


# ---------------------------------------------------------------- report

def write_metric_csv(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,value\n")
        for k in sorted(metrics):
            fh.write(f"{k},{float(metrics[k])!r}\n")


def read_metric_csv(path) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def collect_run(run_dir) -> dict:
    """Final-step training metrics, per-stage final loss and anything in ``eval.csv``."""
    run_dir = Path(run_dir)
    mpath = run_dir / "metrics.csv"
    if not mpath.exists():
        raise IoError(f"missing metrics file {mpath}")
    with open(mpath, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    if rows:
        last = rows[-1]
        out["steps"] = float(last["step"])
        for k, v in last.items():
            if k.startswith("loss_") or k in ("teacher_entropy", "grad_norm"):
                out[f"final_{k}"] = float(v)
        # last total loss reached inside each stage
        for r in rows:
            out[f"stage{r['stage']}_loss_total"] = float(r["loss_total"])
    epath = run_dir / "eval.csv"
    if epath.exists():
        out.update(read_metric_csv(epath))
    return out


def report(run_dirs, out_dir, plots: bool = False) -> Path:
    """Collate runs into ``comparison.csv`` (run_id, metric, value) and ``summary.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = {Path(d).name: collect_run(d) for d in run_dirs}
    path = out_dir / "comparison.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("run_id,metric,value\n")
        for run_id in sorted(runs):
            for metric in sorted(runs[run_id]):
                fh.write(f"{run_id},{metric},{runs[run_id][metric]!r}\n")
    metrics = sorted({m for r in runs.values() for m in r})
    width = max([len(m) for m in metrics] + [6])
    lines = ["metric".ljust(width) + "".join(f"{r:>16}" for r in sorted(runs))]
    for m in metrics:
        cells = "".join(f"{runs[r].get(m, float('nan')):>16.4f}" for r in sorted(runs))
        lines.append(m.ljust(width) + cells)
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if plots:
        _plot_curves(run_dirs, out_dir)
    return path


def _plot_curves(run_dirs, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = {}
    for d in run_dirs:
        with open(Path(d) / "metrics.csv", encoding="utf-8", newline="") as fh:
            curves[Path(d).name] = list(csv.DictReader(fh))
    for metric in ("loss_total", "loss_recon", "loss_kl", "loss_speaker"):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for run_id, rows in sorted(curves.items()):
            ax.plot([int(r["step"]) for r in rows], [float(r[metric]) for r in rows], label=run_id, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / f"{metric}.svg", metadata={"Date": None})
        plt.close(fig)
