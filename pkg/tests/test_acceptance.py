"""Acceptance criteria C1-C10.

Each test records one PASS/FAIL line (shown in the terminal summary) and
asserts at the stated tolerance.  C6 and C7 train full desk-scale models and
take several minutes; they share one session-scoped set of trained runs.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from lrvae import autodiff as ad
from lrvae.cli import main
from lrvae.data import SynthConfig, generate_synthetic
from lrvae.experiments import emit_curve_artifacts, evaluate_latents, latent_splits, run_comparison, run_masking_curve
from lrvae.metrics import METRIC_REPORT_SCHEMA, ProbeConfig, equal_error_rate, weighted_f_score
from lrvae.model import (
    GaussianPosterior,
    LrVaeModel,
    ModelConfig,
    encode,
    forward_losses,
    full_mask,
    kl_divergence,
    make_attribute_mask,
    reparameterize,
)
from lrvae.schedule import apply_dropout_eval, apply_dropout_train, build_schedule
from lrvae.training import TrainConfig, train_variant

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


# C1 ---------------------------------------------------------------------------


def toy_model(**kw) -> LrVaeModel:
    cfg = ModelConfig(n_features=12, n_emotions=3, n_speakers=4, variant="lr_vae", latent_dim=8,
                      encoder_hidden=(10,), head_hidden=(6,), **kw)
    return LrVaeModel(cfg, seed=11)


def toy_batch():
    rng = np.random.default_rng(3)
    return rng.normal(size=(10, 12)), np.arange(10) % 3, np.arange(10) % 4


def test_c1_gradient_correctness(criterion, fd):
    """Every parameter gradient against central differences.

    The reversal layers make the applied encoder update differ from the
    gradient of the scalar objective: encoder parameters receive
    ``-lambda`` times each adversary loss gradient.  The oracle therefore
    differentiates the three loss groups separately and recombines them with
    the reversal weights for encoder parameters and unit weights elsewhere.
    """
    started = time.process_time()
    m = toy_model()
    batch = toy_batch()
    lam_emo, lam_id = m.config.lam_emo_adv, m.config.lam_id_adv

    def parts():
        b = forward_losses(m, batch, np.random.default_rng(5), "train")
        return np.array([b.l_total - b.l_emo_adv - b.l_id_adv, b.l_emo_adv, b.l_id_adv])

    bd = forward_losses(m, batch, np.random.default_rng(5), "train")
    active = all(getattr(bd, k) > 0 for k in ("l_vae", "l_emo", "l_id", "l_emo_adv", "l_id_adv"))
    ad.backward(bd.graph)
    worst_rel = worst_abs = 0.0
    ok = active
    for name, p in m.named_parameters():
        enc = name.startswith("encoder")
        weights = (1.0, -lam_emo if enc else 1.0, -lam_id if enc else 1.0)
        numeric = sum(w * fd(lambda k=k: parts()[k], p.data) for k, w in enumerate(weights))
        diff = np.abs(p.grad - numeric)
        ok = ok and bool(np.all(diff <= 1e-4 * np.abs(numeric) + 1e-8))
        # entries below 1e-4 are judged by the 1e-8 absolute floor alone
        big = np.abs(numeric) >= 1e-4
        if big.any():
            worst_rel = max(worst_rel, float(np.max(diff[big] / np.abs(numeric[big]))))
        if (~big).any():
            worst_abs = max(worst_abs, float(np.max(diff[~big])))
    elapsed = time.process_time() - started
    ok = ok and elapsed < 10.0
    criterion("C1", ok, f"all five terms active={active}, max relative error {worst_rel:.2e} (rtol 1e-4) on entries >= 1e-4, "
                        f"max absolute error {worst_abs:.1e} below that (atol 1e-8), "
                        f"{m.parameter_count()} parameters in {elapsed:.2f} s CPU (< 10 s)")


# C2 ---------------------------------------------------------------------------


def kl_oracle(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, S) || N(0, I)) from the general Gaussian formula with a dense covariance."""
    cov = np.diag(np.exp(log_var))
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return 0.5 * (np.trace(cov) + mu @ mu - mu.size - logdet)


def test_c2_kl_oracle(criterion):
    rng = np.random.default_rng(2)
    worst, lowest = 0.0, math.inf
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        mu = rng.normal(scale=rng.uniform(0.01, 3.0), size=d)
        log_var = rng.normal(scale=rng.uniform(0.01, 2.0), size=d)
        got = float(kl_divergence(GaussianPosterior(ad.as_tensor(mu[None]), ad.as_tensor(log_var[None]))).data)
        worst = max(worst, abs(got - kl_oracle(mu, log_var)))
        lowest = min(lowest, got)
    criterion("C2", worst <= 1e-10 and lowest >= 0.0,
              f"max |KL - oracle| {worst:.2e} (atol 1e-10), min KL {lowest:.3e} over 1000 posteriors")


# C3 ---------------------------------------------------------------------------


def test_c3_dropout_expectation(criterion):
    rng = np.random.default_rng(3)
    draws = 100_000
    nodes = worst = 0
    ok = True
    for _ in range(3):
        size = int(rng.integers(2, 9))
        p_max = float(rng.uniform(0.5, 1.0))
        p_min = float(rng.uniform(0.0, p_max))
        sched = build_schedule(size, p_max, p_min, rng.choice(["decreasing", "increasing"]),
                               rng.choice(["linear", "exponential"]))
        x = rng.normal(size=(1, size))
        out, _ = apply_dropout_train(np.repeat(x, draws, axis=0), sched, rng)
        mc = out.data.mean(axis=0)
        expected = apply_dropout_eval(x, sched)[0]
        se = np.abs(x[0]) * np.sqrt(sched.rates * (1 - sched.rates) / draws)
        dev = np.abs(mc - expected)
        ok = ok and bool(np.all(dev <= 3 * se + 1e-12))
        worst = max(worst, float(np.max(np.where(se > 0, dev / np.where(se > 0, se, 1), 0.0))))
        nodes += size
    criterion("C3", ok, f"largest deviation {worst:.2f} binomial SE (limit 3) over {nodes} nodes, {draws} draws")


# C4 ---------------------------------------------------------------------------


def encoder_grads(graph_fn) -> dict[str, np.ndarray]:
    m, root = graph_fn()
    ad.backward(root)
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in m.named_parameters() if n.startswith("encoder")}


def full_objective(lam_emo: float, lam_id: float):
    def build():
        m = toy_model(lam_emo_adv=lam_emo, lam_id_adv=lam_id)
        return m, forward_losses(m, toy_batch(), np.random.default_rng(7), "train").graph
    return build


def pass_through(branch: str):
    """The adversary loss alone, wired without any reversal layer.

    The random draws follow the same order as the training objective, so
    the sampled latent and dropout masks are identical.
    """
    def build():
        m = toy_model()
        x, emo, spk = toy_batch()
        rng = np.random.default_rng(7)
        post = encode(m, x)
        z = reparameterize(post, rng.standard_normal(post.mu.shape))
        z_emo, _ = apply_dropout_train(z, m.emo_schedule, rng)
        z_id, _ = apply_dropout_train(z, m.id_schedule, rng)
        if branch == "id_adv":
            return m, ad.softmax_cross_entropy(m.id_adv(z_emo), spk)
        return m, ad.softmax_cross_entropy(m.emo_adv(z_id), emo)
    return build


def test_c4_gradient_reversal(criterion):
    worst = 0.0
    ok = True
    for branch in ("id_adv", "emo_adv"):
        reference = encoder_grads(pass_through(branch))
        baseline = encoder_grads(full_objective(0.0, 0.0))
        for lam in (0.0, 0.5, 1.0):
            lams = (0.0, lam) if branch == "id_adv" else (lam, 0.0)
            with_branch = encoder_grads(full_objective(*lams))
            for name, g in with_branch.items():
                contribution = g - baseline[name]
                target = -lam * reference[name]
                ok = ok and np.allclose(contribution, target, rtol=1e-6, atol=1e-12)
                scale = np.maximum(np.abs(target), 1e-12)
                worst = max(worst, float(np.max(np.abs(contribution - target) / scale)))
    criterion("C4", ok, f"adversary contribution vs -lambda * pass-through for lambda in {{0, 0.5, 1}}, "
                        f"both adversaries: max relative error {worst:.2e} (rtol 1e-6)")


# C5 ---------------------------------------------------------------------------


def wfs_oracle(pred, true, n_classes):
    conf = [[0] * n_classes for _ in range(n_classes)]
    for t, p in zip(true, pred):
        conf[t][p] += 1
    total = 0.0
    for c in range(n_classes):
        tp = conf[c][c]
        predicted = sum(conf[r][c] for r in range(n_classes))
        support = sum(conf[c])
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += support * f1
    return total / len(true)


def eer_oracle(scores, same):
    """Evaluate FAR and FRR at every candidate threshold and interpolate the crossing."""
    n_same = sum(same)
    n_diff = len(same) - n_same
    candidates = sorted(set(scores))
    candidates.append(np.nextafter(candidates[-1], np.inf))
    rows = []
    for t in candidates:
        far = sum(1 for s, y in zip(scores, same) if not y and s >= t) / n_diff
        frr = sum(1 for s, y in zip(scores, same) if y and s < t) / n_same
        rows.append((far, frr))
    for (f0, r0), (f1, r1) in zip(rows, rows[1:]):
        if f0 - r0 > 0 >= f1 - r1:
            if f1 == r1:
                return f1
            a = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + a * (f1 - f0)
    return rows[0][0]


def test_c5_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    wfs_err = eer_err = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        true = rng.integers(0, k, n)
        pred = np.where(rng.random(n) < 0.5, true, rng.integers(0, k, n))
        wfs_err = max(wfs_err, abs(weighted_f_score(pred, true, k) - wfs_oracle(pred.tolist(), true.tolist(), k)))

        n = int(rng.integers(2, 60))
        same = rng.random(n) < rng.uniform(0.1, 0.9)
        same[0], same[1] = True, False
        scores = rng.normal(size=n) + rng.uniform(0, 2) * same
        if rng.random() < 0.5:
            scores = np.round(scores, 1)  # ties
        eer_err = max(eer_err, abs(equal_error_rate(scores, same)[0] - eer_oracle(scores.tolist(), same.tolist())))
    criterion("C5", wfs_err <= 1e-9 and eer_err <= 1e-9,
              f"max WFS error {wfs_err:.1e}, max EER error {eer_err:.1e} over 1000 instances each (atol 1e-9)")


# C6 and C7 ----------------------------------------------------------------------


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="session")
def trained_runs(default_dataset):
    """LR-VAE with and without adversaries on the default dataset, three training seeds.

    Models train for the full epoch budget (early stopping disabled) and the
    best dev epoch is restored.
    """
    runs = {}
    for variant in ("lr_vae", "lr_vae_no_adv"):
        for seed in SEEDS:
            started = time.process_time()
            config = TrainConfig(variant=variant, seed=seed, patience=TrainConfig().max_epochs)
            result = train_variant(default_dataset, config)
            runs[variant, seed] = (result.model, time.process_time() - started)
    return runs


@pytest.mark.slow
def test_c6_attribute_alignment(criterion, trained_runs, default_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("curves")
    started = time.process_time()
    curves = []
    for seed in SEEDS:
        model, _ = trained_runs["lr_vae", seed]
        curve = run_masking_curve(model, default_dataset, group_count=32, seed=seed)
        emit_curve_artifacts(curve, out, stem=f"curve_seed{seed}")
        curves.append(curve)
    probe_seconds = time.process_time() - started
    train_seconds = sum(trained_runs["lr_vae", s][1] for s in SEEDS)
    total = train_seconds + probe_seconds
    eer0 = np.mean([c.step(0).eer for c in curves])
    eer16 = np.mean([c.step(16).eer for c in curves])
    wfs0 = np.mean([c.step(0).wfs for c in curves])
    wfs16 = np.mean([c.step(16).wfs for c in curves])
    per_seed = ", ".join(f"s{s}: EER {c.step(0).eer:.3f}->{c.step(16).eer:.3f} WFS {c.step(0).wfs:.3f}->"
                         f"{c.step(16).wfs:.3f}" for s, c in zip(SEEDS, curves))
    ok = eer16 - eer0 >= 0.10 and abs(wfs16 - wfs0) <= 0.05 and total < 1800
    criterion("C6", ok, f"mean EER step0 {eer0:.3f} -> step16 {eer16:.3f} (rise {eer16 - eer0:+.3f}, need >= +0.10); "
                        f"mean WFS {wfs0:.3f} -> {wfs16:.3f} (change {wfs16 - wfs0:+.3f}, need within 0.05); "
                        f"{total:.0f} s CPU (< 1800) [{per_seed}]; curves in {out}")


@pytest.mark.slow
def test_c7_purification(criterion, trained_runs, default_dataset):
    mask = make_attribute_mask(128, "pp_ser", 0.5)
    eers = {}
    for variant in ("lr_vae", "lr_vae_no_adv"):
        eers[variant] = [
            evaluate_latents(latent_splits(trained_runs[variant, s][0], default_dataset), mask,
                             default_dataset.emotion_vocab, s, ProbeConfig())["eer"]
            for s in SEEDS
        ]
    with_adv, without = np.mean(eers["lr_vae"]), np.mean(eers["lr_vae_no_adv"])
    detail = ", ".join(f"s{s}: {a:.3f} vs {b:.3f}" for s, a, b in zip(SEEDS, eers["lr_vae"], eers["lr_vae_no_adv"]))
    criterion("C7", with_adv >= without,
              f"mean pp_ser speaker EER with adversaries {with_adv:.3f} vs without {without:.3f} "
              f"(need with >= without) [{detail}]")


# C8 ---------------------------------------------------------------------------


def test_c8_unified_training_ledger(criterion, default_dataset):
    """The coverage ledger is structural, so a short training budget suffices."""
    result = run_comparison(default_dataset, ["a_vae_ser", "a_vae_sv", "lr_vae"], seeds=[0],
                            train_config=TrainConfig(max_epochs=2, min_epochs=0),
                            probe_config=ProbeConfig(epochs=2))
    cov = result.coverage()
    lr, av = cov["lr_vae"], cov["a_vae"]
    lr_time = result.timing["lr_vae"]["total_train_seconds"]
    av_time = result.timing["a_vae_ser"]["total_train_seconds"] + result.timing["a_vae_sv"]["total_train_seconds"]
    ok = (lr["training_runs"] == 1 and av["training_runs"] == 2
          and set(result.runs["lr_vae"]) >= {"pp_ser", "pp_sv"}
          and "pp_ser" in result.runs["a_vae_ser"] and "pp_sv" in result.runs["a_vae_sv"]
          and av["parameter_count"] > lr["parameter_count"] > 0 and lr_time > 0 and av_time > 0)
    criterion("C8", ok, f"pp_ser+pp_sv coverage: LR-VAE {lr['training_runs']} run / {lr['parameter_count']} "
                        f"parameters / {lr_time:.1f} s; A-VAE {av['training_runs']} runs / {av['parameter_count']} "
                        f"parameters / {av_time:.1f} s (2 epochs each)")


# C9 ---------------------------------------------------------------------------


def test_c9_cli_replay(criterion, tmp_path):
    small = ["--n", "600", "--features", "12", "--speakers", "15"]
    data = tmp_path / "data" / "data.csv"
    model = tmp_path / "train" / "first" / "model.json"
    emb = tmp_path / "encode" / "first" / "embeddings.csv"
    commands = [
        ("data", ["gen-data", *small, "--seed", 4], ["data.csv"]),
        ("train", ["train", "--data", data, "--max-epochs", 2, "--latent-dim", 16], ["model.json", "log.jsonl"]),
        ("encode", ["encode", "--model", model, "--data", data, "--mask", "pp_ser"], ["embeddings.csv"]),
        ("eval", ["eval", "--data", emb, "--probe-epochs", 2], ["report.json"]),
        ("curve", ["experiment", "curve", "--model", model, "--data", data, "--groups", 4, "--probe-epochs", 1],
         ["curve.csv", "curve.svg"]),
        ("compare", ["experiment", "compare", "--data", data, "--variants", "a_vae_ser,lr_vae", "--seeds", 2,
                     "--max-epochs", 1, "--latent-dim", 8, "--probe-epochs", 1], ["comparison.json"]),
    ]
    checked, mismatched = [], []
    for name, argv, artifacts in commands:
        base = tmp_path / name
        sub = 2 if argv[0] == "experiment" else 1
        first = tmp_path / "data" if name == "data" else base / "first"
        assert run_cli(*argv, "--out", first) == 0, name
        assert run_cli(*argv[:sub], "--config", first / "config.json", "--out", base / "again") == 0, name
        for artifact in artifacts + ["config.json"]:
            checked.append(f"{name}/{artifact}")
            if (first / artifact).read_bytes() != (base / "again" / artifact).read_bytes():
                mismatched.append(f"{name}/{artifact}")
    criterion("C9", not mismatched, f"{len(checked) - len(mismatched)}/{len(checked)} artifacts byte-identical "
                                    f"after replay from config.json" + (f"; differ: {mismatched}" if mismatched else ""))


# C10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_end_to_end(criterion, tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    started = time.process_time()
    codes = [
        run_cli("gen-data", "--out", tmp_path / "data"),
        run_cli("train", "--out", tmp_path / "train", "--data", tmp_path / "data" / "data.csv", "--variant", "lr_vae"),
        run_cli("encode", "--out", tmp_path / "enc", "--model", tmp_path / "train" / "model.json",
                "--data", tmp_path / "data" / "data.csv", "--mask", "pp_ser"),
        run_cli("eval", "--out", tmp_path / "eval", "--data", tmp_path / "enc" / "embeddings.csv"),
    ]
    elapsed = time.process_time() - started
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    errors = list(jsonschema.Draft7Validator(METRIC_REPORT_SCHEMA).iter_errors(report))
    with open(tmp_path / "enc" / "embeddings.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    masked_zero = all(float(r[f"z_{i}"]) == 0.0 for r in rows for i in range(64, 128))
    ok = codes == [0, 0, 0, 0] and not errors and masked_zero and elapsed < 600
    criterion("C10", ok, f"exit codes {codes}, report schema errors {len(errors)}, pp_ser columns zeroed "
                         f"{masked_zero}, WFS {report['weighted_f_score']:.3f} EER {report['eer']:.3f}, "
                         f"{elapsed:.0f} s CPU (< 600)")


@pytest.mark.slow
def test_masking_reduces_protected_leakage(trained_runs, default_dataset):
    """Origin metrics dominate the pp conditions on the protected attribute (seed means)."""
    rows = {}
    for condition in ("origin", "pp_ser", "pp_sv"):
        mask = full_mask(128) if condition == "origin" else make_attribute_mask(128, condition, 0.5)
        rows[condition] = [evaluate_latents(latent_splits(trained_runs["lr_vae", s][0], default_dataset), mask,
                                            default_dataset.emotion_vocab, s, ProbeConfig()) for s in SEEDS]
    mean = {c: {k: np.mean([r[k] for r in v]) for k in ("weighted_f_score", "eer")} for c, v in rows.items()}
    # identity is protected under pp_ser, emotion under pp_sv
    assert mean["pp_ser"]["eer"] > mean["origin"]["eer"], mean
    assert mean["pp_sv"]["weighted_f_score"] < mean["origin"]["weighted_f_score"], mean
