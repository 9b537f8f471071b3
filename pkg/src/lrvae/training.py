"""Adam training with seeded mini-batching and dev-set model selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabeledDataset, standardize
from .errors import DimensionError, NumericalError, ValidationError
from .metrics import build_trials, equal_error_rate, weighted_f_score
from .model import VARIANTS, LossBreakdown, LrVaeModel, ModelConfig, forward_losses

log = logging.getLogger(__name__)

MULTITASK_VARIANTS = ("dnn", "vae", "lr_vae_no_adv", "lr_vae")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 128
    weight_reg: float = 1e-6
    max_epochs: int = 200
    patience: int = 10
    min_epochs: int = 20
    seed: int = 0
    variant: str = "lr_vae"
    dev_max_trials: int = 5000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0 or self.min_epochs < 0:
            raise ValidationError("batch_size and patience must be >= 1, max_epochs and min_epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update.  Returns new parameter arrays and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"parameter shape {p.shape} vs gradient shape {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


class Adam:
    """Stateful wrapper over :func:`adam_step` for graph parameters."""

    def __init__(self, params: list[ad.Tensor], lr: float = 1e-3, **kw):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.zeros_like([p.data for p in self.params], **kw)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr)
        for p, value in zip(self.params, new):
            p.data = value


def selection_criterion(metrics: dict, variant: str) -> float:
    """Scalar (higher is better) used to pick the checkpoint on dev data.

    ``wfs_emo`` is the emotion head's weighted f-score on dev rows.
    ``id_score`` is ``1 - EER`` of dev posterior means: dev speakers are
    disjoint from training speakers, so identification accuracy is undefined
    there and verification on the latent is used instead.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    need = {"a_vae_ser": ("wfs_emo",), "a_vae_sv": ("id_score",)}.get(variant, ("wfs_emo", "id_score"))
    missing = [k for k in need if metrics.get(k) is None]
    if missing:
        raise ValidationError(f"selection for {variant} needs metrics {missing}")
    return float(sum(metrics[k] for k in need))


def build_model(dataset: LabeledDataset, config: TrainConfig, **model_options) -> LrVaeModel:
    """Model sized for ``dataset``: one identity class per training speaker."""
    _, n_train_speakers = dataset.train_speaker_index()
    mc = ModelConfig(
        n_features=dataset.n_features,
        n_emotions=dataset.n_emotions,
        n_speakers=n_train_speakers,
        variant=config.variant,
        weight_reg=config.weight_reg,
        **model_options,
    )
    return LrVaeModel(mc, seed=config.seed)


@dataclass
class TrainResult:
    model: LrVaeModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0
    seconds: float = 0.0


def dev_metrics(model: LrVaeModel, x: np.ndarray, emo: np.ndarray, spk: np.ndarray, trials) -> dict:
    out: dict = {}
    if model.emo_head is not None:
        out["wfs_emo"] = weighted_f_score(model.predict_emotion(x), emo, model.config.n_emotions)
    if model.id_head is not None and trials is not None:
        eer, _ = equal_error_rate(trials.score(model.encode_mean(x)), trials.is_same)
        out["id_score"] = 1.0 - eer
    return out


def _epoch_means(sums: dict[str, float], n: int) -> dict[str, float]:
    means = {k: sums[k] / n for k in ("l_recon", "l_kl", "l_emo", "l_id", "l_emo_adv", "l_id_adv", "l_reg")}
    means["l_vae"] = means["l_recon"] + means["l_kl"]
    # the total is re-summed so logged components always add up exactly
    means["l_total"] = (means["l_vae"] + means["l_emo"] + means["l_id"] + means["l_emo_adv"]
                        + means["l_id_adv"] + means["l_reg"])
    return means


def train(model: LrVaeModel, dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    """Train ``model`` and return it restored to its best dev epoch."""
    if model.config.variant != config.variant:
        raise ValidationError(f"model variant {model.config.variant} != config variant {config.variant}")
    if model.config.weight_reg != config.weight_reg:
        raise ValidationError("model and train config disagree on the weight regularization coefficient")
    dataset.require_splits("train", "dev")
    if model.config.n_features != dataset.n_features:
        raise DimensionError(f"model expects {model.config.n_features} features, dataset has {dataset.n_features}")
    ds = standardize(dataset)
    model.standardization = ds.stats.to_dict()
    model.metadata["seeds"] = {"train_seed": config.seed}
    model.metadata["selection"] = {"variant": config.variant,
                                   "criterion": "wfs_emo + id_score" if config.variant in MULTITASK_VARIANTS
                                   else ("wfs_emo" if config.variant == "a_vae_ser" else "id_score")}

    x_train, emo_train, _ = ds.subset("train")
    spk_train, n_spk = ds.train_speaker_index()
    if n_spk != model.config.n_speakers:
        raise ValidationError(f"model has {model.config.n_speakers} identity classes, train split has {n_spk} speakers")
    x_dev, emo_dev, spk_dev = ds.subset("dev")
    dev_trials = None
    if model.id_head is not None:
        if len(np.unique(spk_dev)) < 2:
            raise ValidationError("identity model selection needs at least 2 dev speakers to form verification trials")
        dev_trials = build_trials(spk_dev, config.dev_max_trials, config.seed)

    result = TrainResult(model)
    if config.max_epochs == 0:
        return result

    shuffle_ss, noise_ss = np.random.SeedSequence([config.seed, 1]).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    best_score = -math.inf
    best_state = model.get_state()
    stale = 0
    n = x_train.shape[0]
    started = time.perf_counter()
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = dict.fromkeys(LossBreakdown.COMPONENTS, 0.0)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            losses = forward_losses(model, (x_train[idx], emo_train[idx], spk_train[idx]), noise_rng, "train")
            for name in LossBreakdown.COMPONENTS:
                value = getattr(losses, name)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite {name} at epoch {epoch}, step {result.steps + 1}")
                sums[name] += value * len(idx)
            ad.backward(losses.graph)
            opt.step()
            result.steps += 1
        metrics = dev_metrics(model, x_dev, emo_dev, spk_dev, dev_trials)
        score = selection_criterion(metrics, config.variant)
        improved = score > best_score
        record = {"epoch": epoch, "losses": _epoch_means(sums, n), "dev": metrics, "criterion": score,
                  "selected": improved}
        result.log.append(record)
        log.debug("epoch %d total %.4f criterion %.4f", epoch, record["losses"]["l_total"], score)
        if improved:
            best_score, best_state, result.best_epoch, stale = score, model.get_state(), epoch, 0
        else:
            stale += 1
            # the VAE variants sit on a posterior-collapse plateau for the
            # first epochs; early stopping only applies after warm-up
            if stale >= config.patience and epoch >= config.min_epochs:
                break
    model.set_state(best_state)
    result.seconds = time.perf_counter() - started
    return result


def train_variant(dataset: LabeledDataset, config: TrainConfig, **model_options) -> TrainResult:
    model = build_model(dataset, config, **model_options)
    return train(model, dataset, config)
