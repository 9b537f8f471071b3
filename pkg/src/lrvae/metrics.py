"""Emotion and speaker evaluation: weighted f-score, equal error rate, probes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, ValidationError

DEFAULT_MAX_TRIALS = 20000
REPORT_SCHEMA_ID = "lrvae.metric_report/1"

METRIC_REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema", "weighted_f_score", "eer", "eer_threshold", "trial_count", "per_class"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA_ID},
        "weighted_f_score": {"type": "number", "minimum": 0, "maximum": 1},
        "eer": {"type": "number", "minimum": 0, "maximum": 1},
        "eer_threshold": {"type": "number"},
        "trial_count": {"type": "integer", "minimum": 0},
        "per_class": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "precision", "recall", "f1", "support"],
                "properties": {
                    "label": {"type": "string"},
                    "precision": {"type": "number", "minimum": 0, "maximum": 1},
                    "recall": {"type": "number", "minimum": 0, "maximum": 1},
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                    "support": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def _per_class(predictions, labels, num_classes: int):
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValidationError(f"predictions {pred.shape} and labels {true.shape} must be equal-length vectors")
    if true.size and (true.min() < 0 or true.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes):
        raise ValidationError(f"labels and predictions must lie in [0, {num_classes})")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    predicted = conf.sum(axis=0).astype(np.float64)
    support = conf.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1, support


def per_class_scores(predictions, labels, num_classes: int) -> dict[str, np.ndarray]:
    precision, recall, f1, support = _per_class(predictions, labels, num_classes)
    return {"precision": precision, "recall": recall, "f1": f1, "support": support}


def weighted_f_score(predictions, labels, num_classes: int) -> float:
    """Per-class F1 weighted by true-class support.

    A class with no true and no predicted samples contributes F1 = 0 (and
    has zero weight anyway).
    """
    _, _, f1, support = _per_class(predictions, labels, num_classes)
    n = support.sum()
    if n == 0:
        return 0.0
    return float(np.dot(support / n, f1))


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_scores(emb: np.ndarray, idx_a: np.ndarray, idx_b: np.ndarray) -> np.ndarray:
    """Row-wise cosine for many pairs; zero vectors score 0."""
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    unit = np.divide(emb, norms[:, None], out=np.zeros_like(emb), where=norms[:, None] > 0)
    return np.clip(np.einsum("ij,ij->i", unit[idx_a], unit[idx_b]), -1.0, 1.0)


def equal_error_rate(scores, is_same) -> tuple[float, float]:
    """EER and the threshold where false accepts equal false rejects.

    Thresholds sweep every distinct score plus one point just above the
    maximum.  FAR(t) is the fraction of different-speaker trials scoring
    ``>= t`` and FRR(t) the fraction of same-speaker trials scoring ``< t``.
    The crossing is linearly interpolated between the bracketing thresholds.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(is_same, dtype=bool)
    if scores.shape != same.shape or scores.ndim != 1:
        raise DimensionError("scores and labels must be equal-length vectors")
    n_same, n_diff = int(same.sum()), int((~same).sum())
    if n_same == 0 or n_diff == 0:
        raise ValidationError("EER needs at least one same-speaker and one different-speaker trial")
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    same_sorted = np.sort(scores[same])
    diff_sorted = np.sort(scores[~same])
    far = 1.0 - np.searchsorted(diff_sorted, thresholds, side="left") / n_diff
    frr = np.searchsorted(same_sorted, thresholds, side="left") / n_same
    gap = far - frr  # starts at 1 (lowest threshold), ends at -1
    j = int(np.argmax(gap <= 0))
    if gap[j] == 0:
        return float(far[j]), float(thresholds[j])
    alpha = gap[j - 1] / (gap[j - 1] - gap[j])
    eer = far[j - 1] + alpha * (far[j] - far[j - 1])
    threshold = thresholds[j - 1] + alpha * (thresholds[j] - thresholds[j - 1])
    return float(eer), float(threshold)


@dataclass(frozen=True)
class VerificationTrials:
    """Index pairs into an embedding matrix with same-speaker flags."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    is_same: np.ndarray

    def __len__(self) -> int:
        return int(self.idx_a.shape[0])

    def score(self, embeddings: np.ndarray) -> np.ndarray:
        return cosine_scores(embeddings, self.idx_a, self.idx_b)


def _triangular_decode(k: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over pairs (i < j) of n items to (i, j)."""
    # row i starts at offset i*n - i*(i+1)/2
    i = np.floor((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * k)) / 2).astype(np.int64)
    i = np.clip(i, 0, n - 2)
    start = i * n - i * (i + 1) // 2
    over = k >= start + (n - 1 - i)
    i = i + over
    start = i * n - i * (i + 1) // 2
    under = k < start
    i = i - under
    start = i * n - i * (i + 1) // 2
    j = k - start + i + 1
    return i, j


def build_trials(speaker_labels, max_trials: int = DEFAULT_MAX_TRIALS, seed: int = 0) -> VerificationTrials:
    """Seeded, balanced same/different-speaker pairs without self-pairs."""
    spk = np.asarray(speaker_labels)
    uniq, inverse = np.unique(spk, return_inverse=True)
    if len(uniq) < 2:
        raise ValidationError("verification trials need at least 2 speakers")
    rng = np.random.default_rng(seed)
    groups = [np.flatnonzero(inverse == g) for g in range(len(uniq))]
    pair_counts = np.array([len(g) * (len(g) - 1) // 2 for g in groups], dtype=np.int64)
    n_same_total = int(pair_counts.sum())
    n = len(spk)
    n_diff_total = n * (n - 1) // 2 - n_same_total
    if n_same_total == 0:
        raise ValidationError("no speaker has two or more utterances; cannot form same-speaker trials")
    n_each = min(max_trials // 2, n_same_total, n_diff_total)
    if n_each == 0:
        raise ValidationError(f"max_trials={max_trials} leaves no room for a balanced trial list")

    picks = np.sort(rng.choice(n_same_total, size=n_each, replace=False))
    offsets = np.concatenate([[0], np.cumsum(pair_counts)])
    g = np.searchsorted(offsets, picks, side="right") - 1
    same_a = np.empty(n_each, dtype=np.int64)
    same_b = np.empty(n_each, dtype=np.int64)
    for gi in np.unique(g):
        sel = g == gi
        members = groups[gi]
        i, j = _triangular_decode(picks[sel] - offsets[gi], len(members))
        same_a[sel], same_b[sel] = members[i], members[j]

    diff_a: list[int] = []
    diff_b: list[int] = []
    if n_diff_total <= 4 * n_each:
        a, b = np.triu_indices(n, k=1)
        keep = inverse[a] != inverse[b]
        sel = np.sort(rng.choice(int(keep.sum()), size=n_each, replace=False))
        da, db = a[keep][sel], b[keep][sel]
    else:
        seen: set[tuple[int, int]] = set()
        while len(diff_a) < n_each:
            need = n_each - len(diff_a)
            xa = rng.integers(0, n, size=2 * need)
            xb = rng.integers(0, n, size=2 * need)
            for p, q in zip(xa.tolist(), xb.tolist()):
                if inverse[p] == inverse[q]:
                    continue
                key = (min(p, q), max(p, q))
                if key in seen:
                    continue
                seen.add(key)
                diff_a.append(key[0])
                diff_b.append(key[1])
                if len(diff_a) == n_each:
                    break
        da, db = np.asarray(diff_a, dtype=np.int64), np.asarray(diff_b, dtype=np.int64)
    return VerificationTrials(
        np.concatenate([same_a, da]),
        np.concatenate([same_b, db]),
        np.concatenate([np.ones(n_each, dtype=bool), np.zeros(n_each, dtype=bool)]),
    )


def verification_eer(embeddings: np.ndarray, speaker_labels, max_trials: int = DEFAULT_MAX_TRIALS,
                     seed: int = 0) -> tuple[float, float, int]:
    trials = build_trials(speaker_labels, max_trials, seed)
    eer, thr = equal_error_rate(trials.score(embeddings), trials.is_same)
    return eer, thr, len(trials)


# probes ---------------------------------------------------------------------


@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 20
    patience: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    max_trials: int = DEFAULT_MAX_TRIALS


@dataclass
class ProbeResult:
    task: str
    metric: float
    threshold: float | None = None
    trial_count: int = 0
    predictions: np.ndarray | None = field(default=None, repr=False)
    epochs_run: int = 0
    best_epoch: int = 0


class _Probe:
    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        from .model import Mlp

        self.net = Mlp([n_in, hidden, n_out], rng, "probe")

    def parameters(self):
        return self.net.parameters()


def _evaluate_probe(probe: _Probe, task: str, x: np.ndarray, y: np.ndarray, n_classes: int,
                    max_trials: int, seed: int) -> tuple[float, float | None, int, np.ndarray]:
    logits, hidden = probe.net.infer(x, return_hidden=True)
    if task == "emotion":
        pred = logits.argmax(axis=1)
        return weighted_f_score(pred, y, n_classes), None, 0, pred
    eer, thr, count = verification_eer(hidden, y, max_trials, seed)
    return eer, thr, count, hidden


def train_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    task: str,
    seed: int = 0,
    dev: tuple[np.ndarray, np.ndarray] | None = None,
    config: ProbeConfig | None = None,
) -> ProbeResult:
    """Fit a one-hidden-layer classifier on frozen latents and score it.

    ``emotion`` probes report weighted f-score of predictions on the eval
    rows.  ``speaker`` probes are trained to identify the training speakers;
    their hidden-layer embeddings of the (unseen) eval speakers are scored
    with cosine similarity and the EER is reported.  With ``dev`` given, the
    epoch with the best dev metric is kept (earliest on ties).
    """
    from .training import Adam

    if task not in ("emotion", "speaker"):
        raise ValidationError(f"task must be 'emotion' or 'speaker', got {task!r}")
    cfg = config or ProbeConfig()
    train_x = np.asarray(train_x, dtype=np.float64)
    eval_x = np.asarray(eval_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if np.unique(train_y).size < 2:
        raise ValidationError("probe training needs at least two distinct labels")
    if task == "emotion":
        # eval labels share the training class indices
        n_classes = int(max(train_y.max(), np.max(eval_y))) + 1
    else:
        # speaker ids only need to be contiguous over the training speakers
        _, train_y = np.unique(train_y, return_inverse=True)
        n_classes = int(train_y.max()) + 1
    rng = np.random.default_rng(seed)
    probe = _Probe(train_x.shape[1], cfg.hidden, n_classes, rng)
    opt = Adam(probe.parameters(), lr=cfg.learning_rate)
    higher_better = task == "emotion"

    def dev_score() -> float:
        dx, dy = dev
        m, *_ = _evaluate_probe(probe, task, np.asarray(dx, dtype=np.float64), np.asarray(dy), n_classes,
                                cfg.max_trials, seed)
        return m if higher_better else -m

    best = None
    best_epoch = 0
    stale = 0
    epochs_run = 0
    n = train_x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = ad.softmax_cross_entropy(probe.net(ad.as_tensor(train_x[idx])), train_y[idx])
            ad.backward(loss)
            opt.step()
        epochs_run = epoch
        if dev is None:
            continue
        score = dev_score()
        if best is None or score > best[0]:
            best = (score, [p.data.copy() for p in probe.parameters()])
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best is not None:
        for p, v in zip(probe.parameters(), best[1]):
            p.data = v
    else:
        best_epoch = epochs_run
    metric, thr, count, out = _evaluate_probe(probe, task, eval_x, np.asarray(eval_y), n_classes,
                                              cfg.max_trials, seed)
    return ProbeResult(task, float(metric), thr, count, out if task == "emotion" else None, epochs_run, best_epoch)


@dataclass
class MetricReport:
    weighted_f_score: float
    eer: float
    eer_threshold: float
    trial_count: int
    per_class: list[dict]

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA_ID,
            "weighted_f_score": self.weighted_f_score,
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "trial_count": self.trial_count,
            "per_class": self.per_class,
        }


def probe_report(
    train: tuple[np.ndarray, np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray, np.ndarray],
    emotion_vocab,
    seed: int = 0,
    dev: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    config: ProbeConfig | None = None,
) -> MetricReport:
    """Train both probes on ``train`` latents and score them on ``test``.

    Each tuple is ``(latents, emotion_labels, speaker_labels)``.
    """
    emo = train_probe(train[0], train[1], test[0], test[1], "emotion", seed,
                      dev=(dev[0], dev[1]) if dev is not None else None, config=config)
    spk = train_probe(train[0], train[2], test[0], test[2], "speaker", seed,
                      dev=(dev[0], dev[2]) if dev is not None else None, config=config)
    scores = per_class_scores(emo.predictions, test[1], len(emotion_vocab))
    per_class = [
        {"label": str(label), "precision": float(scores["precision"][i]), "recall": float(scores["recall"][i]),
         "f1": float(scores["f1"][i]), "support": int(scores["support"][i])}
        for i, label in enumerate(emotion_vocab)
    ]
    return MetricReport(emo.metric, spk.metric, float(spk.threshold), spk.trial_count, per_class)
