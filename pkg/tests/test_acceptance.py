"""Acceptance gate: eight end-to-end behaviors the library must exhibit.

Each criterion prints one ``ACCEPTANCE n (<name>): PASS``/``FAIL`` line and
enforces its own runtime budget, so a single run of this file is a complete
yes/no audit. The two training criteria really train; nothing is stubbed.
"""

import functools
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from oracles import (
    FD_RTOL,
    ade_oracle,
    assert_gradients_match,
    collision_oracle,
    enumerate_windows_bruteforce,
    fde_oracle,
    jade_oracle,
    jfde_oracle,
)
from trajdiff.baselines import constant_velocity_prediction
from trajdiff.cli import cmd_evaluate, cmd_sample, cmd_train
from trajdiff.core import PredictionSet, normalize, to_relative
from trajdiff.data import SyntheticConfig, generate_synthetic_scenes, parse_trajectory_file, window_scenes
from trajdiff.denoiser import DiffusionSchedule, TrajectoryDenoiser
from trajdiff.metrics import (
    MetricReport,
    collision_rate,
    jade,
    jfde,
    min_ade,
    min_fde,
)
from trajdiff.objectives import diversity_loss, ebm_loss, regression_loss
from trajdiff.refinement import EnergyNetwork, collision_energy_baseline, refine
from trajdiff.training import RunConfig, TrajectoryForecaster, build_dataset

FIXTURE = Path(__file__).parent / "fixtures" / "eth_sample.txt"


def criterion(num: int, name: str, budget_s: float):
    """Wrap a test so it reports one PASS/FAIL line and a runtime budget."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.monotonic()
            try:
                fn(*args, **kwargs)
                elapsed = time.monotonic() - start
                assert elapsed < budget_s, (
                    f"criterion {num} took {elapsed:.1f}s, budget {budget_s:.0f}s"
                )
            except BaseException:
                print(f"ACCEPTANCE {num} ({name}): FAIL")
                raise
            print(f"ACCEPTANCE {num} ({name}): PASS [{elapsed:.1f}s]")

        return wrapper

    return deco


# ---------------------------------------------------------------------------
# 1. analytic gradients match central finite differences (<= 1e-4 relative)
# ---------------------------------------------------------------------------

@criterion(1, "gradient suite", budget_s=60)
def test_criterion_1_gradient_suite():
    torch.manual_seed(0)
    k_hyp, n, t_f, cond = 3, 3, 4, 6

    y = torch.randn(n, t_f, 2, dtype=torch.float64)
    est = (y + 0.05 * torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64)).requires_grad_()
    hyp = torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64).requires_grad_()
    assert_gradients_match(lambda: regression_loss(y, est, hyp), [est, hyp])

    hyp_d = torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64).requires_grad_()
    assert_gradients_match(lambda: diversity_loss(hyp_d, y, tau=0.7), [hyp_d])

    e_net = EnergyNetwork(horizon=t_f, cond_dim=cond, hidden=4)
    with torch.no_grad():  # zero-initialized heads have zero gradients; perturb
        for p in e_net.parameters():
            p.add_(0.3 * torch.randn_like(p))
    g = torch.randn(k_hyp, n, cond, dtype=torch.float64)
    anchors = torch.randn(n, 2, dtype=torch.float64)
    hyp_e = torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64)
    assert_gradients_match(
        lambda: ebm_loss(e_net, y, hyp_e, g, anchors=anchors),
        list(e_net.parameters()),
    )

    net = TrajectoryDenoiser(horizon=t_f, cond_dim=cond, d_model=8, heads=2,
                             num_layers=1, ff_dim=16, t_steps=5, max_agents=4)
    x_t = torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64)
    g_full = torch.randn(k_hyp, n, cond, dtype=torch.float64)
    target = torch.randn(k_hyp, n, t_f, 2, dtype=torch.float64)

    def denoiser_objective():
        pred = net.predict_target(x_t, 2, g_full, conditioned=True)
        return ((pred - target) ** 2).mean()

    worst = assert_gradients_match(denoiser_objective, list(net.parameters()))
    assert worst <= FD_RTOL


# ---------------------------------------------------------------------------
# 2. vectorized metrics == brute-force loops on 1000 random instances
# ---------------------------------------------------------------------------

@criterion(2, "metric oracle equivalence", budget_s=60)
def test_criterion_2_metric_oracles():
    rng = np.random.default_rng(2)
    for case in range(1000):
        k_hyp = int(rng.integers(1, 9))
        n = int(rng.integers(1, 6))
        t_f = int(rng.integers(1, 13))
        preds = rng.normal(scale=2.0, size=(k_hyp, n, t_f, 2))
        gt = rng.normal(scale=2.0, size=(n, t_f, 2))
        threshold = float(rng.uniform(0.05, 3.0))

        pairs = [
            (min_ade, ade_oracle(preds, gt)),
            (min_fde, fde_oracle(preds, gt)),
            (jade, jade_oracle(preds, gt)),
            (jfde, jfde_oracle(preds, gt)),
        ]
        for fast, slow in pairs:
            assert abs(fast(preds, gt) - slow) <= 1e-9, (case, fast.__name__)
        assert abs(collision_rate(preds, threshold)
                   - collision_oracle(preds, threshold)) <= 1e-9, case
        assert jade(preds, gt) >= min_ade(preds, gt) - 1e-12, case
        assert jfde(preds, gt) >= min_fde(preds, gt) - 1e-12, case


# ---------------------------------------------------------------------------
# 3. composed one-step noising chain matches the closed-form marginal
# ---------------------------------------------------------------------------

@criterion(3, "diffusion chain vs closed form", budget_s=60)
def test_criterion_3_chain_matches_marginal():
    schedule = DiffusionSchedule.linear(t_steps=10)
    rng = np.random.default_rng(3)
    draws = 100_000
    x0 = np.array([0.8, -0.4])

    x = np.broadcast_to(x0, (draws, 2)).copy()
    for t in range(schedule.T_steps):
        beta = schedule.beta[t]
        eps = rng.standard_normal((draws, 2))
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * eps

    ab = schedule.alpha_bar[-1]
    want_mean = math.sqrt(ab) * x0
    want_var = 1.0 - ab
    se_mean = math.sqrt(want_var / draws)
    se_var = want_var * math.sqrt(2.0 / (draws - 1))
    for c in range(2):
        got_mean = x[:, c].mean()
        got_var = x[:, c].var(ddof=1)
        assert abs(got_mean - want_mean[c]) <= 3 * se_mean, c
        assert abs(got_var - want_var) <= 3 * se_var, c


# ---------------------------------------------------------------------------
# 4. overfit a 4-window / 3-agent batch: tiny regression loss, tiny minADE
# ---------------------------------------------------------------------------

@criterion(4, "single-batch overfit", budget_s=300)
def test_criterion_4_overfit():
    config = RunConfig(
        synthetic=SyntheticConfig(num_scenes=4, steps=20, agent_range=(3, 3),
                                  mix={"constant_velocity": 1.0}),
        data_seed=3,
        d_model=32, heads=4, num_layers=2, ff_dim=64, K=20, t_steps=100,
        max_steps=2000, batch_size=4, ebm_hidden=16,
        guidance_scale=0.0, lr=1e-3, seed=0, out_dir="unused",
    )
    scenes = generate_synthetic_scenes(config.synthetic, seed=config.data_seed)
    pairs = window_scenes(scenes, t_h=config.t_h, t_f=config.t_f)
    assert len(pairs) == 4
    assert all(obs.num_agents == 3 for obs, _ in pairs)

    model = TrajectoryForecaster(config)
    model.fit(pairs)

    gauge = model.training_regression_loss(pairs)
    assert gauge < 1e-2, f"regression loss {gauge:.4f} not below 1e-2"

    errors = []
    for i, (obs, fut) in enumerate(pairs):
        preds = model.predict_window(obs, seed=1000 + i * config.K,
                                     w=config.guidance_scale)
        normed = np.stack([
            normalize(to_relative(preds.trajectories[k], obs), model.norm_stats)
            for k in range(config.K)
        ])
        gt_norm = normalize(to_relative(fut.Y, obs), model.norm_stats)
        errors.append(min_ade(normed, gt_norm))
    worst = max(errors)
    assert worst < 0.05, f"normalized minADE_20 {worst:.4f} not below 0.05"


# ---------------------------------------------------------------------------
# 5 + 6c share one real training run on the avoidance-curve dataset
# ---------------------------------------------------------------------------

TOY_CONFIG = RunConfig(
    synthetic=SyntheticConfig(num_scenes=120, steps=25, mix={"repulsive": 1.0}),
    data_seed=11,
    max_train_windows=500, max_test_windows=100,
    d_model=64, heads=4, num_layers=2, ff_dim=256, K=20, t_steps=100,
    batch_size=4, max_steps=8000, lr=1e-3, seed=1,
    guidance_scale=0.0,
    out_dir="unused",
)


@pytest.fixture(scope="module")
def toy_run():
    """Train on 500 windows, sample all 100 test windows with reranking."""
    train, test = build_dataset(TOY_CONFIG)
    assert len(train) == 500 and len(test) == 100
    start = time.monotonic()
    model = TrajectoryForecaster(TOY_CONFIG)
    model.fit(train)
    sampled = []
    for i, (obs, fut) in enumerate(test):
        preds = model.predict_window(obs, seed=9000 + i * TOY_CONFIG.K,
                                     w=TOY_CONFIG.guidance_scale, rerank=True)
        sampled.append((obs, fut, preds))
    elapsed = time.monotonic() - start
    return model, test, sampled, elapsed


@criterion(5, "toy generalization vs constant velocity", budget_s=1800)
def test_criterion_5_toy_generalization(toy_run):
    _, test, sampled, train_time = toy_run
    assert train_time < 1800, f"train+sample took {train_time:.0f}s"

    cv = MetricReport.from_windows(
        [(constant_velocity_prediction(obs, TOY_CONFIG.t_f), fut.Y)
         for obs, fut in test],
        threshold=TOY_CONFIG.collision_threshold,
    )
    model_report = MetricReport.from_windows(
        [(preds, fut.Y) for _, fut, preds in sampled],
        threshold=TOY_CONFIG.collision_threshold,
    )
    ade_gain = 1.0 - model_report.ade / cv.ade
    jade_gain = 1.0 - model_report.jade / cv.jade
    assert ade_gain >= 0.20, (
        f"minADE_20 {model_report.ade:.4f} vs CV {cv.ade:.4f}: "
        f"gain {ade_gain:.1%} < 20%"
    )
    assert jade_gain >= 0.10, (
        f"JADE {model_report.jade:.4f} vs CV {cv.jade:.4f}: "
        f"gain {jade_gain:.1%} < 10%"
    )


# ---------------------------------------------------------------------------
# 6. refinement behavior: identity at zero energy, collision avoidance, rerank
# ---------------------------------------------------------------------------

@criterion(6, "joint refinement behavior", budget_s=180)
def test_criterion_6_refinement(toy_run):
    # (a) zero energy: uniform weights, bit-identical downstream metrics
    rng = np.random.default_rng(6)
    k_hyp, n, t_f, cond = 20, 3, 12, 8
    raw = PredictionSet(trajectories=rng.normal(size=(k_hyp, n, t_f, 2)))
    zero_net = EnergyNetwork(horizon=t_f, cond_dim=cond, hidden=4)
    g = np.zeros((k_hyp, n, cond))
    refined = refine(zero_net, raw, g)
    np.testing.assert_array_equal(refined.weights, raw.weights)
    gt = rng.normal(size=(n, t_f, 2))
    for metric in (min_ade, min_fde, jade, jfde):
        assert metric(refined, gt) == metric(raw, gt)
    assert (collision_rate(refined, 0.3) == collision_rate(raw, 0.3))

    # (b) collision-baseline energy always ranks the collision-free
    #     hypothesis first on constructed two-hypothesis fixtures
    radius = 0.5
    for trial in range(20):
        t_len = 12
        steps = np.arange(1, t_len + 1, dtype=np.float64)
        meet = rng.uniform(-1.0, 1.0, size=2)
        a = meet + np.stack([steps - 6.0, np.zeros(t_len)], axis=1) * 0.4
        b = meet + np.stack([np.zeros(t_len), steps - 6.0], axis=1) * 0.4
        colliding = np.stack([a, b])
        clear = colliding.copy()
        clear[1, :, 0] += 10.0
        if trial % 2 == 0:
            order, clean_index = [colliding, clear], 1
        else:
            order, clean_index = [clear, colliding], 0
        preds = PredictionSet(trajectories=np.stack(order))
        ranked = refine(
            lambda traj: collision_energy_baseline(traj, radius),
            preds,
            rerank=True,
        )
        np.testing.assert_array_equal(
            ranked.trajectories[0], preds.trajectories[clean_index]
        )
        assert collision_rate(ranked.trajectories[:1], radius) == 0.0

    # (c) reranking by the trained energy keeps the top-ranked hypothesis
    #     no more collision-prone than a uniformly random one
    _, _, sampled, _ = toy_run
    rng17 = np.random.default_rng(17)
    top, rand = [], []
    for _, _, preds in sampled:
        top.append(collision_rate(preds.trajectories[:1],
                                  TOY_CONFIG.collision_threshold))
        j = int(rng17.integers(TOY_CONFIG.K))
        rand.append(collision_rate(preds.trajectories[j:j + 1],
                                   TOY_CONFIG.collision_threshold))
    assert np.mean(top) <= np.mean(rand) + 1e-12, (
        f"reranked top-1 CR {np.mean(top):.4f} > random CR {np.mean(rand):.4f}"
    )


# ---------------------------------------------------------------------------
# 7. end-to-end determinism: bit-identical metric reports
# ---------------------------------------------------------------------------

@criterion(7, "end-to-end determinism", budget_s=300)
def test_criterion_7_determinism(tmp_path):
    def one_run() -> bytes:
        config = RunConfig(
            synthetic=SyntheticConfig(num_scenes=8, steps=25),
            d_model=16, heads=4, num_layers=1, ff_dim=32, K=3, t_steps=6,
            max_steps=2, batch_size=4, ebm_hidden=8,
            max_train_windows=6, max_test_windows=3,
            out_dir=str(tmp_path / "run"),
        )
        summary = cmd_train(config)
        dump = tmp_path / "preds.jsonl"
        cmd_sample(summary["checkpoint_final"], dump, seed=5)
        report = tmp_path / "report.json"
        cmd_evaluate(dump, out_path=report)
        return report.read_bytes()

    assert one_run() == one_run()


# ---------------------------------------------------------------------------
# 8. annotation-file windowing matches an enumeration oracle exactly
# ---------------------------------------------------------------------------

@criterion(8, "annotation windowing oracle", budget_s=60)
def test_criterion_8_windowing_oracle():
    text = FIXTURE.read_text()
    scenes = parse_trajectory_file(FIXTURE)
    expected = enumerate_windows_bruteforce(text, 8, 12, 1)
    got = window_scenes(scenes, t_h=8, t_f=12, stride=1)
    assert len(got) == len(expected)
    for (obs, fut), (_, start, n_agents) in zip(got, expected):
        assert obs.start == start
        assert obs.X.shape == (n_agents, 8, 2)
        assert fut.Y.shape == (n_agents, 12, 2)
