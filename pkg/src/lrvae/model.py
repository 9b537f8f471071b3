"""LR-VAE and its baseline variants.

One class covers every variant in the comparison; a :class:`VariantSpec`
switches the pieces on and off:

===============  ==========  =======  =========  =========  ==========
variant          stochastic  decoder  emo/id     adversary  layered
                 encoder              heads      heads      dropout
===============  ==========  =======  =========  =========  ==========
dnn              no          no       both       none       no
vae              yes         yes      both       none       no
a_vae_ser        yes         yes      emo        id         no
a_vae_sv         yes         yes      id         emo        no
lr_vae_no_adv    yes         yes      both       none       yes
lr_vae           yes         yes      both       both       yes
===============  ==========  =======  =========  =========  ==========

With layered dropout the emotion head reads the decreasing-schedule view of
``z`` and the identity head the increasing-schedule view.  The identity
adversary reads the emotion view and the emotion adversary reads the identity
view, both through gradient reversal, so the encoder is pushed to scrub
speaker information from the emotion end and vice versa.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, ValidationError
from .schedule import (
    DEFAULT_P_MAX,
    DEFAULT_P_MIN,
    PreserveRateSchedule,
    apply_dropout_eval,
    apply_dropout_train,
    build_schedule,
)

CHECKPOINT_FORMAT = 1
VARIANTS = ("dnn", "vae", "a_vae_ser", "a_vae_sv", "lr_vae_no_adv", "lr_vae")


@dataclass(frozen=True)
class VariantSpec:
    stochastic: bool
    decoder: bool
    emo_head: bool
    id_head: bool
    emo_adv: bool
    id_adv: bool
    layered_dropout: bool


VARIANT_SPECS = {
    "dnn": VariantSpec(False, False, True, True, False, False, False),
    "vae": VariantSpec(True, True, True, True, False, False, False),
    "a_vae_ser": VariantSpec(True, True, True, False, False, True, False),
    "a_vae_sv": VariantSpec(True, True, False, True, True, False, False),
    "lr_vae_no_adv": VariantSpec(True, True, True, True, False, False, True),
    "lr_vae": VariantSpec(True, True, True, True, True, True, True),
}


def variant_spec(variant: str) -> VariantSpec:
    try:
        return VARIANT_SPECS[variant]
    except KeyError:
        raise ValidationError(f"unknown variant {variant!r}; valid variants: {', '.join(VARIANTS)}") from None


@dataclass
class ModelConfig:
    n_features: int
    n_emotions: int
    n_speakers: int
    variant: str = "lr_vae"
    latent_dim: int = 128
    encoder_hidden: tuple[int, ...] = (256, 128)
    head_hidden: tuple[int, ...] = (64,)
    lam_emo_adv: float = 1.0
    lam_id_adv: float = 1.0
    p_max: float = DEFAULT_P_MAX
    p_min: float = DEFAULT_P_MIN
    schedule_form: str = "linear"
    weight_reg: float = 1e-6

    def __post_init__(self):
        variant_spec(self.variant)
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        for name in ("n_features", "n_emotions", "n_speakers", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_emotions < 2 or self.n_speakers < 2:
            raise ValidationError("need at least 2 emotion classes and 2 training speakers")
        if self.lam_emo_adv < 0 or self.lam_id_adv < 0:
            raise ValidationError("reversal strengths must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


class Dense:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None, name: str):
        limit = 1.0 / math.sqrt(n_in)
        w = rng.uniform(-limit, limit, size=(n_in, n_out)) if rng is not None else np.zeros((n_in, n_out))
        self.weight = ad.parameter(w, name=f"{name}.weight")
        self.bias = ad.parameter(np.zeros(n_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.forward_dense(x, self.weight, self.bias)

    def infer(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.data + self.bias.data

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Mlp:
    """Dense layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator | None, name: str, final_relu: bool = False):
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.final_relu = final_relu

    def __call__(self, x: Tensor, return_hidden: bool = False):
        hidden = x
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = ad.relu(x)
            if i == len(self.layers) - 2:
                hidden = x
        return (x, hidden) if return_hidden else x

    def infer(self, x: np.ndarray, return_hidden: bool = False):
        hidden = x
        for i, layer in enumerate(self.layers):
            x = layer.infer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = np.maximum(x, 0.0)
            if i == len(self.layers) - 2:
                hidden = x
        return (x, hidden) if return_hidden else x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


@dataclass
class GaussianPosterior:
    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise DimensionError(f"mu shape {self.mu.shape} != log_var shape {self.log_var.shape}")


@dataclass
class LossBreakdown:
    l_vae: float
    l_recon: float
    l_kl: float
    l_emo: float
    l_id: float
    l_emo_adv: float
    l_id_adv: float
    l_reg: float
    l_total: float
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    COMPONENTS = ("l_vae", "l_recon", "l_kl", "l_emo", "l_id", "l_emo_adv", "l_id_adv", "l_reg", "l_total")

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.COMPONENTS}


@dataclass(frozen=True)
class AttributeMask:
    keep: np.ndarray
    purpose: str = "none"
    cut: float | None = None

    def __len__(self) -> int:
        return int(self.keep.shape[0])


class LrVaeModel:
    def __init__(self, config: ModelConfig, seed: int | None = 0, zero_init: bool = False):
        self.config = config
        self.spec = variant_spec(config.variant)
        rng = None if zero_init else np.random.default_rng(seed)
        c = config
        enc_sizes = [c.n_features, *c.encoder_hidden]
        self.trunk = Mlp(enc_sizes, rng, "encoder", final_relu=True)
        self.mu_layer = Dense(enc_sizes[-1], c.latent_dim, rng, "encoder.mu")
        self.logvar_layer = Dense(enc_sizes[-1], c.latent_dim, rng, "encoder.log_var") if self.spec.stochastic else None
        self.decoder = (
            Mlp([c.latent_dim, *reversed(c.encoder_hidden), c.n_features], rng, "decoder") if self.spec.decoder else None
        )

        def head(n_out: int, name: str) -> Mlp:
            return Mlp([c.latent_dim, *c.head_hidden, n_out], rng, name)

        self.emo_head = head(c.n_emotions, "emo_head") if self.spec.emo_head else None
        self.id_head = head(c.n_speakers, "id_head") if self.spec.id_head else None
        self.emo_adv = head(c.n_emotions, "emo_adv") if self.spec.emo_adv else None
        self.id_adv = head(c.n_speakers, "id_adv") if self.spec.id_adv else None
        if self.spec.layered_dropout:
            self.emo_schedule = build_schedule(c.latent_dim, c.p_max, c.p_min, "decreasing", c.schedule_form)
            self.id_schedule = build_schedule(c.latent_dim, c.p_max, c.p_min, "increasing", c.schedule_form)
        else:
            self.emo_schedule = self.id_schedule = None
        self.init_seed = seed
        self.standardization: dict[str, list[float]] | None = None
        self.metadata: dict = {}

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        modules = [self.trunk, self.mu_layer, self.logvar_layer, self.decoder,
                   self.emo_head, self.id_head, self.emo_adv, self.id_adv]
        for module in modules:
            if module is None:
                continue
            for p in module.parameters():
                yield p.name, p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def get_state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise DimensionError(f"{name}: stored shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def _check_features(self, x) -> None:
        width = x.shape[1] if x.ndim == 2 else None
        if width != self.config.n_features:
            raise DimensionError(f"input shape {tuple(x.shape)} does not match feature dim {self.config.n_features}")

    # inference without graph construction --------------------------------

    def encode_mean(self, x: np.ndarray) -> np.ndarray:
        """Posterior means for a batch of (standardized) features."""
        x = np.asarray(x, dtype=np.float64)
        self._check_features(x)
        return self.mu_layer.infer(self.trunk.infer(x))

    def standardize_input(self, x: np.ndarray) -> np.ndarray:
        if self.standardization is None:
            return np.asarray(x, dtype=np.float64)
        mean = np.asarray(self.standardization["mean"])
        std = np.asarray(self.standardization["std"])
        return (np.asarray(x, dtype=np.float64) - mean) / np.where(std > 0, std, 1.0)

    def predict_emotion(self, x: np.ndarray) -> np.ndarray:
        """Emotion head predictions in eval mode (dropout replaced by scaling)."""
        if self.emo_head is None:
            raise ValidationError(f"variant {self.config.variant} has no emotion head")
        z = self.encode_mean(x)
        if self.emo_schedule is not None:
            z = apply_dropout_eval(z, self.emo_schedule)
        return self.emo_head.infer(z).argmax(axis=1)


def encode(model: LrVaeModel, x) -> GaussianPosterior:
    x = ad.as_tensor(x)
    model._check_features(x.data)
    h = model.trunk(x)
    mu = model.mu_layer(h)
    if model.logvar_layer is not None:
        log_var = model.logvar_layer(h)
    else:
        log_var = ad.as_tensor(np.zeros(mu.shape))
    return GaussianPosterior(mu, log_var)


def reparameterize(post: GaussianPosterior, eps) -> Tensor:
    """``z = mu + exp(log_var / 2) * eps``; ``eps`` is treated as a constant."""
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise DimensionError(f"eps shape {eps.shape} != posterior shape {post.mu.shape}")
    return post.mu + ad.exp(post.log_var * 0.5) * eps


def kl_divergence(post: GaussianPosterior) -> Tensor:
    """Batch mean of KL(N(mu, exp(log_var)) || N(0, I)), summed over latent nodes."""
    mu, lv = post.mu, post.log_var
    batch = mu.shape[0] if len(mu.shape) == 2 else 1
    per_elem = (ad.exp(lv) + ad.square(mu) - lv) - 1.0
    return ad.tensor_sum(per_elem) * (0.5 / batch)


def reconstruction_loss(x, x_hat) -> Tensor:
    """Unit-variance Gaussian negative log-likelihood without constants.

    Per sample this is half the summed squared error over features; the
    batch mean is returned.
    """
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"reconstruction shapes differ: {x.shape} vs {x_hat.shape}")
    batch = x.shape[0] if len(x.shape) == 2 else 1
    return ad.tensor_sum(ad.square(x - x_hat)) * (0.5 / batch)


def weight_penalty(model: LrVaeModel) -> Tensor:
    total = None
    for p in model.parameters():
        term = ad.tensor_sum(ad.square(p))
        total = term if total is None else total + term
    return total * model.config.weight_reg


def _check_labels(labels: np.ndarray, n_classes: int, what: str, batch: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"{what} labels shape {labels.shape} does not match batch size {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"{what} label out of range [0, {n_classes})")
    return labels


def forward_losses(
    model: LrVaeModel,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    rng: np.random.Generator | None,
    mode: str = "train",
) -> LossBreakdown:
    """Build the full objective for one batch.

    The returned breakdown carries the scalar graph in ``.graph`` for
    backpropagation.  In eval mode no randomness is used: ``z`` is the
    posterior mean and dropout becomes scaling by the preserve rates.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    x, emo, spk = batch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("batch must be a non-empty 2-d array")
    n = x.shape[0]
    c = model.config
    emo = _check_labels(emo, c.n_emotions, "emotion", n)
    spk = _check_labels(spk, c.n_speakers, "speaker", n)
    train = mode == "train"
    if train and rng is None:
        raise ValidationError("train mode needs an rng")
    spec = model.spec

    post = encode(model, x)
    if spec.stochastic and train:
        z = reparameterize(post, rng.standard_normal(post.mu.shape))
    else:
        z = post.mu

    zero = ad.as_tensor(0.0)
    if spec.decoder:
        l_recon = reconstruction_loss(x, model.decoder(z))
        l_kl = kl_divergence(post)
    else:
        l_recon = l_kl = zero

    if spec.layered_dropout:
        if train:
            z_emo, _ = apply_dropout_train(z, model.emo_schedule, rng)
            z_id, _ = apply_dropout_train(z, model.id_schedule, rng)
        else:
            z_emo = apply_dropout_eval(z, model.emo_schedule)
            z_id = apply_dropout_eval(z, model.id_schedule)
    else:
        z_emo = z_id = z

    l_emo = ad.softmax_cross_entropy(model.emo_head(z_emo), emo) if model.emo_head else zero
    l_id = ad.softmax_cross_entropy(model.id_head(z_id), spk) if model.id_head else zero
    # each adversary reads the view owned by the other task
    l_id_adv = (
        ad.softmax_cross_entropy(model.id_adv(ad.gradient_reversal(z_emo, c.lam_id_adv)), spk) if model.id_adv else zero
    )
    l_emo_adv = (
        ad.softmax_cross_entropy(model.emo_adv(ad.gradient_reversal(z_id, c.lam_emo_adv)), emo) if model.emo_adv else zero
    )
    l_reg = weight_penalty(model)
    l_vae = l_recon + l_kl
    total = l_vae + l_emo + l_id + l_emo_adv + l_id_adv + l_reg

    vals = {k: float(t.data) for k, t in (("l_recon", l_recon), ("l_kl", l_kl), ("l_emo", l_emo), ("l_id", l_id),
                                          ("l_emo_adv", l_emo_adv), ("l_id_adv", l_id_adv), ("l_reg", l_reg))}
    l_vae_val = vals["l_recon"] + vals["l_kl"]
    # totals are summed in the same order the graph sums them
    l_total_val = l_vae_val + vals["l_emo"] + vals["l_id"] + vals["l_emo_adv"] + vals["l_id_adv"] + vals["l_reg"]
    return LossBreakdown(l_vae=l_vae_val, l_total=l_total_val, graph=total, **vals)


def make_attribute_mask(latent_dim: int, purpose: str, cut: float = 0.5) -> AttributeMask:
    """Keep the emotion end (``pp_ser``) or the identity end (``pp_sv``).

    ``ceil(cut * latent_dim)`` nodes survive; index 0 is the emotion end.
    """
    if not (0.0 < cut < 1.0):
        raise ValidationError(f"cut must lie strictly between 0 and 1, got {cut}")
    if purpose not in ("pp_ser", "pp_sv"):
        raise ValidationError(f"purpose must be 'pp_ser' or 'pp_sv', got {purpose!r}")
    n_keep = math.ceil(round(cut * latent_dim, 9))
    keep = np.zeros(latent_dim, dtype=bool)
    if purpose == "pp_ser":
        keep[:n_keep] = True
    else:
        keep[latent_dim - n_keep:] = True
    return AttributeMask(keep, purpose, float(cut))


def full_mask(latent_dim: int) -> AttributeMask:
    return AttributeMask(np.ones(latent_dim, dtype=bool), "none", None)


def mask_latent(z, mask: AttributeMask):
    """Zero the dropped nodes; works on arrays and tensors."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if data.shape[-1] != len(mask):
        raise DimensionError(f"latent width {data.shape[-1]} != mask length {len(mask)}")
    keep = mask.keep.astype(np.float64)
    if isinstance(z, Tensor):
        return z * keep
    return np.where(mask.keep, data, 0.0)  # +0.0, not -0.0, in dropped slots


# checkpoints ---------------------------------------------------------------


def checkpoint_dict(model: LrVaeModel) -> dict:
    params = {name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
              for name, p in model.named_parameters()}
    schedules = None
    if model.emo_schedule is not None:
        schedules = {"emotion": model.emo_schedule.to_dict(), "identity": model.id_schedule.to_dict()}
    return {
        "format_version": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "schedules": schedules,
        "reversal": {"lam_emo_adv": model.config.lam_emo_adv, "lam_id_adv": model.config.lam_id_adv},
        "standardization": model.standardization,
        "seeds": {"init_seed": model.init_seed, **model.metadata.get("seeds", {})},
        "metadata": {k: v for k, v in model.metadata.items() if k != "seeds"},
        "parameters": params,
    }


def save_checkpoint(model: LrVaeModel, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(model), sort_keys=True) + "\n", encoding="utf-8")
    return path


def model_from_dict(doc: dict) -> LrVaeModel:
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    config = ModelConfig(**doc["config"])
    model = LrVaeModel(config, seed=doc["seeds"].get("init_seed"), zero_init=True)
    state = {}
    for name, entry in doc["parameters"].items():
        state[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
    expected = {name for name, _ in model.named_parameters()}
    if set(state) != expected:
        raise ValidationError(f"checkpoint parameters {sorted(set(state) ^ expected)} do not match the variant")
    model.set_state(state)
    if doc.get("schedules"):
        stored = PreserveRateSchedule.from_dict(doc["schedules"]["emotion"])
        if len(stored) != config.latent_dim:
            raise DimensionError("stored schedule length does not match latent dim")
    model.standardization = doc.get("standardization")
    seeds = dict(doc.get("seeds", {}))
    seeds.pop("init_seed", None)
    model.metadata = {**doc.get("metadata", {}), "seeds": seeds}
    return model


def load_checkpoint(path: str | Path) -> LrVaeModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
