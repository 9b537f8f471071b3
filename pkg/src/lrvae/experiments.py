"""Method comparison table and incremental group-masking curves."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LabeledDataset, standardize
from .errors import ValidationError
from .metrics import ProbeConfig, build_trials, probe_report
from .model import VARIANTS, AttributeMask, LrVaeModel, full_mask, make_attribute_mask, mask_latent
from .training import TrainConfig, train_variant

COMPARISON_SCHEMA_ID = "lrvae.comparison/1"
DIRECTIONS = ("bottom_up", "top_down")

# which conditions each variant is evaluated under
CONDITIONS = {
    "dnn": ("origin",),
    "vae": ("origin",),
    "a_vae_ser": ("pp_ser",),
    "a_vae_sv": ("pp_sv",),
    "lr_vae_no_adv": ("origin", "pp_ser", "pp_sv"),
    "lr_vae": ("origin", "pp_ser", "pp_sv"),
}


def latent_splits(model: LrVaeModel, dataset: LabeledDataset) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Posterior means per split, as ``(latents, emotion, speaker)``.

    Raw features go through the model's stored standardization when it has
    one, otherwise through the dataset's own train statistics.
    """
    if dataset.standardized:
        feats = dataset.features
    elif model.standardization is not None:
        feats = model.standardize_input(dataset.features)
    else:
        feats = standardize(dataset).features
    out = {}
    for split in ("train", "dev", "test"):
        idx = dataset.rows(split)
        out[split] = (model.encode_mean(feats[idx]), dataset.emotion_labels[idx], dataset.speaker_labels[idx])
    return out


def _masked(triple, mask: AttributeMask):
    z, emo, spk = triple
    return mask_latent(z, mask), emo, spk


def condition_mask(variant: str, condition: str, latent_dim: int, cut: float) -> AttributeMask:
    # A-VAE is already trained for its protected condition: its latent is used whole
    if condition == "origin" or variant.startswith("a_vae"):
        return full_mask(latent_dim)
    return make_attribute_mask(latent_dim, condition, cut)


def evaluate_latents(latents, mask: AttributeMask, emotion_vocab, seed: int, probe: ProbeConfig) -> dict:
    tr, dv, te = (_masked(latents[s], mask) for s in ("train", "dev", "test"))
    report = probe_report(tr, te, emotion_vocab, seed=seed, dev=dv, config=probe)
    return {"weighted_f_score": report.weighted_f_score, "eer": report.eer, "trial_count": report.trial_count}


# comparison -----------------------------------------------------------------


@dataclass
class ComparisonResult:
    variants: list[str]
    seeds: list[int]
    cut: float
    dataset_fingerprint: str
    train_config: dict
    probe_config: dict
    runs: dict = field(default_factory=dict)  # variant -> condition -> metric -> per-seed values
    cost: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)  # wall-clock seconds; not part of the deterministic table

    def cell(self, variant: str, condition: str) -> dict:
        values = self.runs[variant][condition]
        return {
            metric: {"mean": float(np.mean(v)), "std": float(np.std(v)), "values": [float(x) for x in v]}
            for metric, v in values.items()
        }

    def coverage(self) -> dict:
        """Training runs needed per seed to produce both pp_ser and pp_sv."""
        out = {}
        if "lr_vae" in self.runs:
            out["lr_vae"] = {"training_runs": self.cost["lr_vae"]["training_runs_per_seed"],
                             "models": ["lr_vae"],
                             "parameter_count": self.cost["lr_vae"]["parameter_count"]}
        if "a_vae_ser" in self.runs and "a_vae_sv" in self.runs:
            out["a_vae"] = {
                "training_runs": self.cost["a_vae_ser"]["training_runs_per_seed"]
                + self.cost["a_vae_sv"]["training_runs_per_seed"],
                "models": ["a_vae_ser", "a_vae_sv"],
                "parameter_count": self.cost["a_vae_ser"]["parameter_count"] + self.cost["a_vae_sv"]["parameter_count"],
            }
        return out

    def to_dict(self) -> dict:
        return {
            "schema": COMPARISON_SCHEMA_ID,
            "dataset_fingerprint": self.dataset_fingerprint,
            "seeds": self.seeds,
            "cut": self.cut,
            "train_config": self.train_config,
            "probe_config": self.probe_config,
            "table": {v: {c: self.cell(v, c) for c in self.runs[v]} for v in self.variants},
            "cost": self.cost,
            "coverage": self.coverage(),
        }

    def timing_dict(self) -> dict:
        return {"schema": "lrvae.timing/1", "seconds": self.timing}


def run_comparison(
    dataset: LabeledDataset,
    variants=VARIANTS,
    seeds=(0,),
    train_config: TrainConfig | None = None,
    probe_config: ProbeConfig | None = None,
    cut: float = 0.5,
    model_options: dict | None = None,
) -> ComparisonResult:
    """Train every variant for every seed and probe each of its conditions.

    All cells share one standardized dataset, one probe seed per run seed
    and therefore identical trial lists.
    """
    variants = list(variants)
    seeds = [int(s) for s in seeds]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValidationError(f"unknown variants {unknown}; valid variants: {', '.join(VARIANTS)}")
    if not seeds:
        raise ValidationError("at least one seed is required")
    base = train_config or TrainConfig()
    probe = probe_config or ProbeConfig()
    model_options = model_options or {}
    ds = standardize(dataset)
    result = ComparisonResult(variants, seeds, cut, ds.fingerprint(),
                              {k: v for k, v in base.to_dict().items() if k not in ("seed", "variant")},
                              asdict(probe))
    for variant in variants:
        per_condition = {c: {"weighted_f_score": [], "eer": []} for c in CONDITIONS[variant]}
        cost = {"training_runs": 0, "training_runs_per_seed": 1, "parameter_count": 0, "optimizer_steps": [],
                "epochs": [], "best_epoch": []}
        seconds = []
        for seed in seeds:
            started = time.perf_counter()
            trained = train_variant(ds, replace(base, variant=variant, seed=seed), **model_options)
            seconds.append(time.perf_counter() - started)
            cost["training_runs"] += 1
            cost["parameter_count"] = trained.model.parameter_count()
            cost["optimizer_steps"].append(trained.steps)
            cost["epochs"].append(len(trained.log))
            cost["best_epoch"].append(trained.best_epoch)
            latents = latent_splits(trained.model, ds)
            dim = trained.model.config.latent_dim
            for condition in CONDITIONS[variant]:
                metrics = evaluate_latents(latents, condition_mask(variant, condition, dim, cut),
                                           ds.emotion_vocab, seed, probe)
                per_condition[condition]["weighted_f_score"].append(metrics["weighted_f_score"])
                per_condition[condition]["eer"].append(metrics["eer"])
        result.runs[variant] = per_condition
        result.cost[variant] = cost
        result.timing[variant] = {"train_seconds": seconds, "total_train_seconds": float(sum(seconds))}
    return result


# masking curves ---------------------------------------------------------------


@dataclass(frozen=True)
class CurveStep:
    groups_masked: int
    nodes_masked: int
    wfs: float
    eer: float


@dataclass
class MaskingCurve:
    group_count: int
    direction: str
    latent_dim: int
    steps: list[CurveStep] = field(default_factory=list)

    def step(self, groups_masked: int) -> CurveStep:
        return self.steps[groups_masked]


def group_mask(latent_dim: int, group_count: int, groups_masked: int, direction: str) -> AttributeMask:
    """Mask ``groups_masked`` groups from the identity end (bottom_up) or emotion end (top_down)."""
    if direction not in DIRECTIONS:
        raise ValidationError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if group_count < 1 or latent_dim % group_count:
        raise ValidationError(f"group count {group_count} does not divide latent dimension {latent_dim}")
    width = latent_dim // group_count
    n = groups_masked * width
    keep = np.ones(latent_dim, dtype=bool)
    if n:
        if direction == "bottom_up":
            keep[latent_dim - n:] = False
        else:
            keep[:n] = False
    return AttributeMask(keep, direction, None)


def run_masking_curve(
    model: LrVaeModel,
    dataset: LabeledDataset,
    group_count: int = 32,
    direction: str = "bottom_up",
    seed: int = 0,
    probe_config: ProbeConfig | None = None,
    steps=None,
) -> MaskingCurve:
    """Probe the frozen latent after masking 0, 1, ... ``group_count`` groups.

    Each step trains fresh emotion and speaker probes on the masked
    latents.  ``steps`` restricts the evaluated group counts (all by default).
    """
    dim = model.config.latent_dim
    group_mask(dim, group_count, 0, direction)  # validates before any work
    probe = probe_config or ProbeConfig()
    latents = latent_splits(model, dataset)
    curve = MaskingCurve(group_count, direction, dim)
    todo = range(group_count + 1) if steps is None else sorted(set(int(k) for k in steps))
    for k in todo:
        if not 0 <= k <= group_count:
            raise ValidationError(f"step {k} outside 0..{group_count}")
        mask = group_mask(dim, group_count, k, direction)
        metrics = evaluate_latents(latents, mask, dataset.emotion_vocab, seed, probe)
        curve.steps.append(CurveStep(k, int((~mask.keep).sum()), metrics["weighted_f_score"], metrics["eer"]))
    return curve


def _fmt(v: float) -> str:
    return repr(float(v))


def write_curve_csv(curve: MaskingCurve, path: str | Path) -> Path:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["groups_masked", "wfs", "eer"])
            for s in curve.steps:
                w.writerow([s.groups_masked, _fmt(s.wfs), _fmt(s.eer)])
    except OSError as exc:
        raise OSError(f"cannot write curve CSV {path}: {exc.strerror}") from exc
    return path


def read_curve_csv(path: str | Path) -> list[tuple[int, float, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["groups_masked", "wfs", "eer"]:
        raise ValidationError(f"{path}: unexpected header {rows[0]}")
    return [(int(k), float(w), float(e)) for k, w, e in rows[1:]]


def render_curve_svg(curve: MaskingCurve, width: int = 640, height: int = 400) -> str:
    """Static line plot of both series against groups masked (y in [0, 1])."""
    left, right, top, bottom = 60, 20, 40, 50
    pw, ph = width - left - right, height - top - bottom
    g = max(curve.group_count, 1)

    def px(k: float) -> str:
        return f"{left + pw * k / g:.2f}"

    def py(v: float) -> str:
        return f"{top + ph * (1.0 - min(max(v, 0.0), 1.0)):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
        f'Masking curve ({curve.direction}, {curve.group_count} groups, D={curve.latent_dim})</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for tick in range(0, 11, 2):
        v = tick / 10
        parts.append(f'<line x1="{left - 4}" y1="{py(v)}" x2="{left}" y2="{py(v)}" stroke="black"/>')
        parts.append(f'<text x="{left - 8}" y="{py(v)}" text-anchor="end" dominant-baseline="middle">{v:.1f}</text>')
    step = max(1, g // 8)
    for k in range(0, g + 1, step):
        parts.append(f'<line x1="{px(k)}" y1="{top + ph}" x2="{px(k)}" y2="{top + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{px(k)}" y="{top + ph + 18}" text-anchor="middle">{k}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">groups masked</text>')
    parts.append(f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {top + ph / 2:.1f})">score</text>')
    for attr, color, label, row in (("wfs", "#1f77b4", "emotion WFS", 0), ("eer", "#d62728", "speaker EER", 1)):
        pts = " ".join(f"{px(s.groups_masked)},{py(getattr(s, attr))}" for s in curve.steps)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 10 + 16 * row
        parts.append(f'<line x1="{left + pw - 110}" y1="{ly}" x2="{left + pw - 90}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw - 85}" y="{ly}" dominant-baseline="middle">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_curve_artifacts(curve: MaskingCurve, out_dir: str | Path, stem: str = "curve") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = write_curve_csv(curve, out_dir / f"{stem}.csv")
    svg_path = out_dir / f"{stem}.svg"
    try:
        svg_path.write_text(render_curve_svg(curve), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write curve SVG {svg_path}: {exc.strerror}") from exc
    return csv_path, svg_path


def curve_to_dict(curve: MaskingCurve) -> dict:
    return {"group_count": curve.group_count, "direction": curve.direction, "latent_dim": curve.latent_dim,
            "steps": [asdict(s) for s in curve.steps]}


def save_json(doc: dict, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def trial_fingerprint(dataset: LabeledDataset, seed: int, max_trials: int) -> str:
    """Identifies the test trial list a probe run uses (shared by all variants)."""
    _, _, spk = dataset.subset("test")
    t = build_trials(spk, max_trials, seed)
    return hashlib.sha256(t.idx_a.tobytes() + t.idx_b.tobytes()).hexdigest()[:16]
