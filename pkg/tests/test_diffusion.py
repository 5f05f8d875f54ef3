import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import toy_problem
from vidcurate.diffusion import (REFERENCE_STAGES, LatentVideo, MLPDenoiser, StageConfig, TokenSequence,
                                 TrainingDiverged, add_noise, build_schedule, concat_text, diffusion_loss,
                                 evaluate_loss, load_checkpoint, patchify, reverse_step, run_progressive,
                                 run_stage, sample_latents, sample_timestep, save_checkpoint, split_concat,
                                 timestep_intervals, unpatchify)
from vidcurate.diffusion.training import write_loss_trace


# schedule

def test_single_step_schedule():
    s = build_schedule(1)
    assert s.abar(1) == pytest.approx(1 - 1e-4, abs=1e-15)


def test_terminal_abar_near_zero():
    assert build_schedule(1000).abar(1000) < 0.01


@pytest.mark.parametrize("T", [1, 2, 7, 100, 1000])
def test_schedule_invariants(T):
    s = build_schedule(T)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.abar(1) <= 1
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    assert np.max(np.abs(prev * s.alpha - s.alpha_bar)) < 1e-12
    assert s.beta[0] == pytest.approx(1e-4) and s.beta[-1] == pytest.approx(2e-2 if T > 1 else 1e-4)


def test_schedule_errors():
    with pytest.raises(ValueError):
        build_schedule(0)
    with pytest.raises(ValueError):
        build_schedule(10, kind="cosine-ish")
    with pytest.raises(ValueError):
        build_schedule(10).abar(11)


def test_posterior_std_zero_at_first_step():
    s = build_schedule(50)
    assert s.posterior_std(1) == 0.0
    expected = math.sqrt(s.beta_at(10) * (1 - s.abar(9)) / (1 - s.abar(10)))
    assert s.posterior_std(10) == pytest.approx(expected, rel=1e-14)


# patchify

def test_patchify_shapes():
    v = LatentVideo(np.random.default_rng(0).standard_normal((8, 16, 16, 4)))
    seq = patchify(v, 2, 4)
    assert seq.length == 64 and seq.dim == 128
    assert np.array_equal(unpatchify(seq, (8, 16, 16, 4), 2, 4).grid, v.grid)


def test_unit_rates_flatten():
    grid = np.random.default_rng(1).standard_normal((3, 4, 5, 2))
    seq = patchify(LatentVideo(grid), 1, 1)
    assert seq.tokens.shape == (60, 2)
    assert np.array_equal(seq.tokens, grid.reshape(60, 2))


def test_token_order_time_major():
    grid = np.zeros((4, 4, 4, 1))
    grid[2:, :2, 2:, 0] = 1.0  # second temporal group, top-right patch
    seq = patchify(LatentVideo(grid), 2, 2)
    hot = np.flatnonzero(seq.tokens.sum(axis=1))
    assert hot.tolist() == [1 * 4 + 0 * 2 + 1]


def test_zero_tokens_zero_grid():
    out = unpatchify(TokenSequence(np.zeros((64, 128))), (8, 16, 16, 4), 2, 4)
    assert not out.grid.any()


def test_shuffled_tokens_detected():
    v = LatentVideo(np.random.default_rng(2).standard_normal((4, 8, 8, 2)))
    seq = patchify(v, 2, 2)
    shuffled = TokenSequence(seq.tokens[np.random.default_rng(3).permutation(seq.length)])
    assert not np.array_equal(unpatchify(shuffled, (4, 8, 8, 2), 2, 2).grid, v.grid)


@pytest.mark.parametrize("shape,q,p,axis", [((3, 4, 4, 1), 2, 2, "F"), ((2, 6, 4, 1), 2, 4, "H"),
                                            ((2, 4, 6, 1), 2, 4, "W")])
def test_divisibility_error_names_axis(shape, q, p, axis):
    with pytest.raises(ValueError, match=f"axis {axis}="):
        patchify(LatentVideo(np.zeros(shape)), q, p)


def test_unpatchify_inconsistent():
    with pytest.raises(ValueError):
        unpatchify(TokenSequence(np.zeros((10, 128))), (8, 16, 16, 4), 2, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_patchify_round_trip_property(fq, hp, wp, q, p, _, C, seed):
    shape = (fq * q, hp * p, wp * p, C)
    grid = np.random.default_rng(seed).standard_normal(shape)
    seq = patchify(LatentVideo(grid), q, p)
    assert seq.length == fq * hp * wp and seq.dim == q * p * p * C
    assert np.array_equal(unpatchify(seq, shape, q, p).grid, grid)


# forward noising and loss

def test_add_noise_examples():
    z, eps = np.full(5, 2.0), np.ones(5)
    assert np.array_equal(add_noise(z, eps, 1.0), z)
    np.testing.assert_allclose(add_noise(z, eps, 1e-12), eps, atol=1e-5)
    assert add_noise(np.array([2.0]), np.array([1.0]), 0.25)[0] == pytest.approx(1.866025, abs=1e-6)


def test_add_noise_errors():
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ValueError):
        add_noise(np.zeros(3), np.zeros(3), 0.0)


@pytest.mark.parametrize("abar", [0.9, 0.5, 0.01])
def test_forward_variance_preserved(abar):
    rng = np.random.default_rng(4)
    n = 200_000
    out = add_noise(rng.standard_normal(n), rng.standard_normal(n), abar)
    # standard error of the sample variance of a unit Gaussian is sqrt(2/n)
    assert abs(out.var() - 1.0) < 3 * math.sqrt(2 / n)


def test_loss_examples():
    eps = np.random.default_rng(5).standard_normal((1000, 1000))
    assert diffusion_loss(eps, eps) == 0.0
    assert diffusion_loss(eps + 1, eps) == pytest.approx(1.0, abs=1e-9)
    assert diffusion_loss(np.zeros_like(eps), eps) == pytest.approx(1.0, abs=0.01)
    with pytest.raises(ValueError):
        diffusion_loss(np.zeros(3), np.zeros(2))


# concatenation

def test_concat_text():
    rng = np.random.default_rng(6)
    text, vision = TokenSequence(rng.standard_normal((3, 4)), "text"), TokenSequence(rng.standard_normal((5, 4)))
    seq = concat_text(vision, text)
    assert seq.length == 8 and seq.boundary == 3 and seq.kind == "concatenated"
    assert np.array_equal(seq.tokens[:3], text.tokens)
    v2, t2 = split_concat(seq)
    assert np.array_equal(v2.tokens, vision.tokens) and np.array_equal(t2.tokens, text.tokens)


def test_concat_empty_text_passthrough():
    vision = TokenSequence(np.ones((5, 4)))
    seq = concat_text(vision, TokenSequence(np.zeros((0, 4)), "text"))
    assert seq.boundary == 0 and np.array_equal(seq.vision, vision.tokens)


def test_concat_dim_mismatch():
    with pytest.raises(ValueError):
        concat_text(TokenSequence(np.ones((5, 4))), TokenSequence(np.ones((2, 3)), "text"))


# timestep partition

def test_interval_examples():
    assert timestep_intervals(1, 1000) == [(1, 1000)]
    assert timestep_intervals(4, 1000)[2] == (501, 750)
    iv = timestep_intervals(4, 10)
    assert [hi - lo + 1 for lo, hi in iv] == [3, 3, 2, 2]
    assert iv == [(1, 3), (4, 6), (7, 8), (9, 10)]


@pytest.mark.parametrize("N,T", [(1, 1), (3, 10), (7, 100), (8, 1000), (10, 10)])
def test_intervals_partition(N, T):
    covered = [t for lo, hi in timestep_intervals(N, T) for t in range(lo, hi + 1)]
    assert covered == list(range(1, T + 1))


def test_interval_errors():
    rng = np.random.default_rng(0)
    for N, T in ((5, 4), (0, 10)):
        with pytest.raises(ValueError):
            sample_timestep(0, N, T, rng)
    with pytest.raises(ValueError):
        sample_timestep(4, 4, 10, rng)


def test_sample_timestep_uniform_within_interval():
    rng = np.random.default_rng(7)
    draws = np.array([sample_timestep(2, 4, 1000, rng) for _ in range(100_000)])
    assert draws.min() >= 501 and draws.max() <= 750
    counts = np.bincount(draws - 501, minlength=250)
    expected = len(draws) / 250
    # 10 bins of 25 steps keep the per-bin noise well below the 5% bound
    binned = counts.reshape(10, 25).sum(axis=1)
    assert np.max(np.abs(binned - len(draws) / 10)) < 0.05 * len(draws) / 10
    assert counts.min() > 0.5 * expected


def test_sample_timestep_single_interval_range():
    rng = np.random.default_rng(8)
    draws = {sample_timestep(0, 1, 5, rng) for _ in range(500)}
    assert draws == {1, 2, 3, 4, 5}


# reverse process

class OracleDenoiser:
    def __init__(self, eps):
        self.eps = eps

    def evaluate(self, seq, t, theta=None):
        return self.eps


class ZeroDenoiser:
    def evaluate(self, seq, t, theta=None):
        return np.zeros_like(seq.vision)


def test_reverse_inverts_forward_with_oracle():
    rng = np.random.default_rng(9)
    sched = build_schedule(1)
    z0, eps = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    zt = add_noise(z0, eps, sched.abar(1))
    ctx = TokenSequence(rng.standard_normal((2, 4)), "text")
    out = reverse_step(zt, 1, sched, OracleDenoiser(eps), ctx, rng)
    assert np.max(np.abs(out - z0)) < 1e-10


def test_one_step_inversion_at_t1_of_long_schedule():
    rng = np.random.default_rng(10)
    sched = build_schedule(1000)
    z0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    out = reverse_step(add_noise(z0, eps, sched.abar(1)), 1, sched, OracleDenoiser(eps),
                       TokenSequence(np.zeros((0, 4)), "text"), rng)
    assert np.max(np.abs(out - z0)) < 1e-10


def test_final_step_deterministic():
    sched = build_schedule(10)
    z = np.ones((2, 4))
    ctx = TokenSequence(np.zeros((0, 4)), "text")
    a = reverse_step(z, 1, sched, ZeroDenoiser(), ctx, np.random.default_rng(1))
    b = reverse_step(z, 1, sched, ZeroDenoiser(), ctx, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_zero_input_is_posterior_noise():
    sched = build_schedule(10)
    ctx = TokenSequence(np.zeros((0, 4)), "text")
    out = reverse_step(np.zeros((3, 4)), 5, sched, ZeroDenoiser(), ctx, np.random.default_rng(11))
    xi = np.random.default_rng(11).standard_normal((3, 4))
    np.testing.assert_allclose(out, sched.posterior_std(5) * xi, rtol=1e-14)


def test_reverse_step_range():
    with pytest.raises(ValueError):
        reverse_step(np.zeros((1, 4)), 0, build_schedule(10), ZeroDenoiser(),
                     TokenSequence(np.zeros((0, 4)), "text"), np.random.default_rng())


def test_sample_latents_shape():
    den = MLPDenoiser(4, hidden=8, seed=0)
    out = sample_latents((3, 4), build_schedule(20), den, TokenSequence(np.ones((2, 4)), "text"),
                         np.random.default_rng(0))
    assert out.shape == (3, 4) and np.all(np.isfinite(out))


# denoiser

def test_denoiser_output_shape_and_determinism():
    den = MLPDenoiser(6, hidden=16, seed=3)
    seq = concat_text(TokenSequence(np.random.default_rng(0).standard_normal((5, 6))),
                      TokenSequence(np.ones((2, 6)), "text"))
    a, b = den.evaluate(seq, 17), den.evaluate(seq, 17)
    assert a.shape == (5, 6) and np.array_equal(a, b)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    den = MLPDenoiser(3, hidden=5, temb_dim=4, seed=1)
    theta = den.theta + 0.1 * rng.standard_normal(den.n_params)
    x, ctx, eps = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 3))
    t = np.array([3, 40])
    _, grad = den.loss_and_grad(x, t, ctx, eps, theta)
    h = 1e-6
    for k in range(den.n_params):
        e = np.zeros_like(theta)
        e[k] = h
        up, _ = den.loss_and_grad(x, t, ctx, eps, theta + e)
        dn, _ = den.loss_and_grad(x, t, ctx, eps, theta - e)
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[k]) <= 1e-4 * max(abs(fd), abs(grad[k]), 1e-8) + 1e-9, k


# training

def small_stage(name="transfer_pretrain", **kw):
    kw.setdefault("learning_rate", 1e-2)
    kw.setdefault("batch_size", 64)
    kw.setdefault("iterations", 500)
    return StageConfig(name=name, **kw)


def test_toy_convergence():
    data = toy_problem()
    den = MLPDenoiser(4, hidden=64, seed=0)
    sched = build_schedule(1000)
    initial = evaluate_loss(den, den.theta, data, sched)
    res = run_stage(small_stage(), den, data, np.random.default_rng(0), sched)
    final = evaluate_loss(den, res.theta, data, sched)
    assert len(res.losses) == 500
    assert final < 0.1 * initial


def test_zero_learning_rate_freezes_theta():
    den = MLPDenoiser(4, hidden=8, seed=0)
    data = toy_problem()
    res = run_stage(small_stage(learning_rate=0.0, iterations=20), den, data, np.random.default_rng(0))
    assert np.array_equal(res.theta, den.theta)
    assert len(res.losses) == 20 and np.all(np.isfinite(res.losses))


def test_zero_learning_rate_flat_eval_trace():
    den = MLPDenoiser(4, hidden=8, seed=0)
    data, sched = toy_problem(), build_schedule(100)
    cfg = small_stage(learning_rate=0.0, iterations=1)
    theta, evals = den.theta, []
    for seed in range(5):
        theta = run_stage(cfg, den, data, np.random.default_rng(seed), sched, theta=theta).theta
        evals.append(evaluate_loss(den, theta, data, sched))
    assert len(set(evals)) == 1


def test_same_seed_same_trace():
    den = MLPDenoiser(4, hidden=16, seed=0)
    data = toy_problem()
    a = run_stage(small_stage(iterations=30), den, data, np.random.default_rng(5))
    b = run_stage(small_stage(iterations=30), den, data, np.random.default_rng(5))
    assert a.losses == b.losses and np.array_equal(a.theta, b.theta)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration():
    den = MLPDenoiser(4, hidden=8, seed=0)
    bad = toy_problem()
    bad.vision[0] = np.full((1, 4), np.inf)
    data = bad.subset([0])
    with pytest.raises(TrainingDiverged) as info:
        run_stage(small_stage(iterations=5), den, data, np.random.default_rng(0))
    assert info.value.iteration == 0 and info.value.stage == "transfer_pretrain"


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig("unknown", 1e-3)
    with pytest.raises(ValueError):
        StageConfig("transfer_pretrain", 1e-3, batch_size=2, num_workers=4)
    with pytest.raises(ValueError):
        run_stage(small_stage(num_workers=8, batch_size=8), MLPDenoiser(4, 8), toy_problem(),
                  np.random.default_rng(0), build_schedule(4))


def test_reference_hyperparameters():
    assert REFERENCE_STAGES["transfer_pretrain"] == {"learning_rate": 1e-4, "batch_size": 128, "iterations": 65000}
    assert REFERENCE_STAGES["privacy_finetune"] == {"learning_rate": 5e-5, "batch_size": 128, "iterations": 4500}
    ref = StageConfig.reference("privacy_finetune")
    assert (ref.learning_rate, ref.batch_size, ref.iterations) == (5e-5, 128, 4500)


def test_progressive_requires_lower_rate():
    den = MLPDenoiser(4, 8)
    with pytest.raises(ValueError):
        run_progressive(small_stage(), small_stage("privacy_finetune", learning_rate=1e-2), den,
                        toy_problem(), toy_problem(), np.random.default_rng(0))


def test_progressive_noop_second_stage(tmp_path):
    den = MLPDenoiser(4, hidden=16, seed=0)
    data = toy_problem()
    s1 = small_stage(iterations=40)
    res = run_progressive(s1, small_stage("privacy_finetune", learning_rate=5e-3, iterations=0),
                          den, data, data.subset([0, 1]), np.random.default_rng(1), checkpoint_dir=tmp_path)
    header, theta1 = load_checkpoint(tmp_path / "transfer_pretrain.ckpt")
    assert np.array_equal(res.theta, theta1)
    assert header == {"stage": "transfer_pretrain", "iteration": 40, "D": 4, "theta_length": den.n_params}
    assert [p.name for p in res.checkpoints] == ["transfer_pretrain.ckpt", "privacy_finetune.ckpt"]
    assert {s for s, _, _ in res.trace} == {"transfer_pretrain"}


def test_progressive_finetune_no_regression(tmp_path):
    den = MLPDenoiser(4, hidden=64, seed=0)
    data1 = toy_problem()
    data2 = data1.subset([0, 2, 4, 6])
    sched = build_schedule(1000)
    s1 = small_stage(iterations=500)
    s2 = small_stage("privacy_finetune", learning_rate=5e-3, iterations=100)
    res = run_progressive(s1, s2, den, data1, data2, np.random.default_rng(0), sched, tmp_path)
    _, theta1 = load_checkpoint(tmp_path / "transfer_pretrain.ckpt")
    before = evaluate_loss(den, theta1, data2, sched)
    after = evaluate_loss(den, res.theta, data2, sched)
    assert after <= 1.1 * before
    stages = [s for s, _, _ in res.trace]
    assert stages.count("transfer_pretrain") == 500 and stages.count("privacy_finetune") == 100


def test_checkpoint_round_trip(tmp_path):
    theta = np.random.default_rng(0).standard_normal(37)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, theta, stage="privacy_finetune", iteration=9, dim=4)
    header, back = load_checkpoint(path)
    assert np.array_equal(back, theta) and header["theta_length"] == 37
    raw = path.read_bytes()
    assert raw[raw.index(b"\n") + 1:] == theta.astype("<f8").tobytes()


def test_truncated_checkpoint_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, np.zeros(4), stage="transfer_pretrain", iteration=1, dim=4)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_loss_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    write_loss_trace(path, [("transfer_pretrain", 0, 1.5), ("privacy_finetune", 0, 0.25)])
    assert path.read_text().splitlines() == ["stage,iteration,loss", "transfer_pretrain,0,1.5",
                                             "privacy_finetune,0,0.25"]
