"""Labeled feature datasets with speaker-disjoint splits.

Two sources: a synthetic generator whose features entangle an emotion
factor, a speaker factor and nuisance dimensions through a random nonlinear
mixing, and a CSV reader for precomputed embeddings.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

SPLITS = ("train", "dev", "test")
# neutral, happy, angry, disgust, sad (percent of utterances)
DEFAULT_EMOTION_PRIORS = (53.05, 27.10, 8.81, 7.09, 3.95)
DEFAULT_EMOTION_NAMES = ("neutral", "happy", "angry", "disgust", "sad")
LABEL_COLUMNS = ("emotion", "speaker", "split")
FEATURE_PREFIXES = ("feature_", "z_")


@dataclass(frozen=True)
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        # zero-variance dimensions are only centered
        return (x - self.mean) / np.where(self.std > 0, self.std, 1.0)

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    emotion_labels: np.ndarray
    speaker_labels: np.ndarray
    split: np.ndarray
    emotion_vocab: tuple[str, ...]
    speaker_vocab: tuple[str, ...]
    standardized: bool = False
    stats: Standardization | None = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        n = feats.shape[0]
        emo = np.array(self.emotion_labels, dtype=np.int64)
        spk = np.array(self.speaker_labels, dtype=np.int64)
        split = np.array(self.split, dtype=object)
        if feats.ndim != 2 or emo.shape != (n,) or spk.shape != (n,) or split.shape != (n,):
            raise ValidationError("features, labels and split tags must have matching row counts")
        for arr in (feats, emo, spk, split):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "emotion_labels", emo)
        object.__setattr__(self, "speaker_labels", spk)
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "emotion_vocab", tuple(self.emotion_vocab))
        object.__setattr__(self, "speaker_vocab", tuple(self.speaker_vocab))
        self._validate()
        if self.stats is None:
            train = feats[split == "train"]
            object.__setattr__(self, "stats", Standardization(train.mean(axis=0), train.std(axis=0)))

    def _validate(self) -> None:
        unknown = set(self.split.tolist()) - set(SPLITS)
        if unknown:
            raise ValidationError(f"unknown split tags: {sorted(unknown)}")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")
        speakers = {s: set(self.speaker_labels[self.split == s].tolist()) for s in SPLITS}
        for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
            shared = speakers[a] & speakers[b]
            if shared:
                name = self.speaker_vocab[min(shared)] if self.speaker_vocab else min(shared)
                raise ValidationError(f"speaker {name!r} appears in both {a} and {b} splits")
        if not np.any(self.split == "train"):
            raise ValidationError("dataset has no train rows")

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_emotions(self) -> int:
        return len(self.emotion_vocab)

    def rows(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.rows(split)
        return self.features[idx], self.emotion_labels[idx], self.speaker_labels[idx]

    def train_speaker_index(self) -> tuple[np.ndarray, int]:
        """Map train-split speaker labels to contiguous ids for the identity head."""
        spk = self.speaker_labels[self.rows("train")]
        uniq = np.unique(spk)
        lookup = {int(s): i for i, s in enumerate(uniq)}
        return np.array([lookup[int(s)] for s in spk], dtype=np.int64), len(uniq)

    def require_splits(self, *splits: str) -> None:
        for s in splits:
            if not np.any(self.split == s):
                raise ValidationError(f"dataset has no {s!r} rows")

    def check_emotion_coverage(self) -> None:
        for s in SPLITS:
            present = set(self.emotion_labels[self.split == s].tolist())
            missing = set(range(self.n_emotions)) - present
            if missing:
                raise ValidationError(
                    f"emotion classes {[self.emotion_vocab[m] for m in sorted(missing)]} missing from {s} split"
                )

    def with_features(self, features: np.ndarray, *, standardized: bool) -> "LabeledDataset":
        return replace(self, features=features, standardized=standardized, stats=self.stats)

    def fingerprint(self) -> str:
        """Hash of labels and split assignment; equal across variants of one run."""
        h = hashlib.sha256()
        h.update(self.features.tobytes())
        h.update(self.emotion_labels.tobytes())
        h.update(self.speaker_labels.tobytes())
        h.update("\n".join(self.split.tolist()).encode())
        return h.hexdigest()[:16]


def standardize(dataset: LabeledDataset) -> LabeledDataset:
    """Transform every split with statistics computed on train rows only."""
    if dataset.standardized:
        return dataset
    return dataset.with_features(dataset.stats.apply(dataset.features), standardized=True)


# synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    n: int = 6000
    n_features: int = 64
    n_emotions: int = 5
    n_speakers: int = 40
    emotion_strength: float = 1.5
    identity_strength: float = 1.0
    speaker_dim: int = 8
    nuisance_dim: int = 8
    cross_leak: float = 0.5
    noise_std: float = 0.1
    class_priors: tuple[float, ...] | None = None
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        if min(self.n, self.n_features, self.speaker_dim) < 1 or self.nuisance_dim < 0:
            raise ValidationError("sizes must be positive")
        if self.n_emotions < 2:
            raise ValidationError("need at least 2 emotion classes")
        if self.n_speakers < 3:
            raise ValidationError(
                f"n_speakers={self.n_speakers}: at least 3 speakers are needed to form disjoint train/dev/test splits"
            )
        if self.emotion_strength <= 0 or self.identity_strength <= 0:
            raise ValidationError("factor strengths must be positive")
        if not (0.0 <= self.cross_leak <= 1.0):
            raise ValidationError("cross_leak must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        if self.class_priors is not None and len(self.class_priors) != self.n_emotions:
            raise ValidationError("class_priors length must equal n_emotions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_priors"] = list(self.class_priors) if self.class_priors is not None else None
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if d.get("class_priors") is not None:
            d["class_priors"] = tuple(d["class_priors"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown synthetic-data options: {sorted(unknown)}")
        return cls(**d)


def emotion_priors(config: SynthConfig) -> np.ndarray:
    if config.class_priors is not None:
        p = np.asarray(config.class_priors, dtype=np.float64)
    elif config.n_emotions == len(DEFAULT_EMOTION_PRIORS):
        p = np.asarray(DEFAULT_EMOTION_PRIORS)
    else:
        p = np.ones(config.n_emotions)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValidationError("class priors must be non-negative with a positive sum")
    return p / p.sum()


def _speaker_split_counts(n_speakers: int, fractions) -> tuple[int, int, int]:
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    n_dev = max(1, int(round(n_speakers * f[1])))
    n_test = max(1, int(round(n_speakers * f[2])))
    n_train = n_speakers - n_dev - n_test
    if n_train < 1:
        raise ValidationError(f"{n_speakers} speakers cannot fill train/dev/test splits")
    return n_train, n_dev, n_test


def synthetic_factors(config: SynthConfig) -> dict[str, np.ndarray]:
    """Draw labels and the pre-mixing factor blocks.

    Returns ``emotion``/``speaker`` labels, the ``emotion_factor``,
    ``speaker_factor`` and ``nuisance`` blocks, the final ``features`` and the
    speaker ``split`` assignment.  A pure function of ``config``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    E, S, ds = config.n_emotions, config.n_speakers, config.speaker_dim
    # all structural randomness is drawn first so it does not depend on n
    speaker_embed = rng.standard_normal((S, ds))
    spk_to_emo = rng.standard_normal((ds, E)) / math.sqrt(ds)
    emo_to_spk = rng.standard_normal((E, ds))
    width = E + ds + config.nuisance_dim
    mixing = rng.standard_normal((width, config.n_features)) / math.sqrt(width)
    speaker_order = rng.permutation(S)

    emotion = rng.choice(E, size=config.n, p=emotion_priors(config))
    speaker = rng.integers(0, S, size=config.n)
    nuisance = rng.standard_normal((config.n, config.nuisance_dim))
    noise = rng.standard_normal((config.n, config.n_features))

    onehot = np.eye(E)[emotion]
    leak = config.cross_leak
    # emotion and identity are correlated: each block carries a leak of the other
    emotion_factor = config.emotion_strength * (onehot + leak * speaker_embed[speaker] @ spk_to_emo)
    speaker_factor = config.identity_strength * (speaker_embed[speaker] + leak * emo_to_spk[emotion])
    hidden = np.concatenate([emotion_factor, speaker_factor, nuisance], axis=1)
    features = np.tanh(hidden @ mixing) + config.noise_std * noise

    n_train, n_dev, _ = _speaker_split_counts(S, config.split_fractions)
    speaker_split = np.empty(S, dtype=object)
    speaker_split[speaker_order[:n_train]] = "train"
    speaker_split[speaker_order[n_train:n_train + n_dev]] = "dev"
    speaker_split[speaker_order[n_train + n_dev:]] = "test"
    return {
        "emotion": emotion,
        "speaker": speaker,
        "emotion_factor": emotion_factor,
        "speaker_factor": speaker_factor,
        "nuisance": nuisance,
        "features": features,
        "split": speaker_split[speaker],
    }


def generate_synthetic(config: SynthConfig | None = None) -> LabeledDataset:
    config = config or SynthConfig()
    f = synthetic_factors(config)
    if config.n_emotions == len(DEFAULT_EMOTION_NAMES):
        emo_names = DEFAULT_EMOTION_NAMES
    else:
        emo_names = tuple(f"emo{i}" for i in range(config.n_emotions))
    spk_names = tuple(f"spk{i:03d}" for i in range(config.n_speakers))
    ds = LabeledDataset(f["features"], f["emotion"], f["speaker"], f["split"], emo_names, spk_names)
    ds.check_emotion_coverage()
    return ds


# CSV ------------------------------------------------------------------------


def _format_float(v: float) -> str:
    return repr(float(v))


def export_csv(dataset: LabeledDataset, path: str | Path, feature_prefix: str = "feature_") -> Path:
    """Write the dataset schema: features, then emotion, speaker, split."""
    path = Path(path)
    header = [f"{feature_prefix}{i}" for i in range(dataset.n_features)] + list(LABEL_COLUMNS)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row, e, s, sp in zip(dataset.features, dataset.emotion_labels, dataset.speaker_labels, dataset.split):
            w.writerow([_format_float(v) for v in row]
                       + [dataset.emotion_vocab[e], dataset.speaker_vocab[s], sp])
    return path


class CsvFormatError(ValidationError):
    pass


def ingest_csv(path: str | Path) -> LabeledDataset:
    """Parse a dataset CSV.

    The header must be ``<prefix>0..<prefix>{F-1},emotion,speaker,split`` with
    prefix ``feature_`` or ``z_``.  Label vocabularies follow first-appearance
    order.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if len(header) < 4 or tuple(header[-3:]) != LABEL_COLUMNS:
            raise CsvFormatError(f"{path}:1: header must end with emotion,speaker,split")
        n_feat = len(header) - 3
        prefix = next((p for p in FEATURE_PREFIXES if header[0].startswith(p)), None)
        if prefix is None or header[:n_feat] != [f"{prefix}{i}" for i in range(n_feat)]:
            raise CsvFormatError(f"{path}:1: feature columns must be named feature_0..feature_{n_feat - 1}")
        feats, emo, spk, split = [], [], [], []
        emo_vocab: dict[str, int] = {}
        spk_vocab: dict[str, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[:n_feat]]
            except ValueError:
                bad = next(v for v in row[:n_feat] if not _is_float(v))
                raise CsvFormatError(f"{path}:{lineno}: non-numeric feature value {bad!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise CsvFormatError(f"{path}:{lineno}: non-finite feature value")
            tag = row[-1]
            if tag not in SPLITS:
                raise CsvFormatError(f"{path}:{lineno}: unknown split tag {tag!r}")
            feats.append(values)
            emo.append(emo_vocab.setdefault(row[-3], len(emo_vocab)))
            spk.append(spk_vocab.setdefault(row[-2], len(spk_vocab)))
            split.append(tag)
    if not feats:
        raise CsvFormatError(f"{path}: no data rows")
    return LabeledDataset(
        np.asarray(feats, dtype=np.float64).reshape(len(feats), n_feat),
        emo, spk, np.asarray(split, dtype=object), tuple(emo_vocab), tuple(spk_vocab),
    )


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False

