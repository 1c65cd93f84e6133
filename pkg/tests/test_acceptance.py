"""Acceptance suite: one test (or pair of tests) per criterion, each recording a verdict line."""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from flowarm import cflownets as cf
from flowarm import cli
from flowarm import env as reacher
from flowarm import io as fio
from flowarm.harness import EvalRecord, RunManifest, detect_asymptote, evaluate_policy, run_stage1
from flowarm.nn import init_mlp, mlp_backward, mlp_forward, mse_loss
from flowarm.plot import learning_curve_svg
from oracles import central_difference, max_relative_error, total_variation, two_link_tip
from test_cflownets import AnalyticFlow, identity_retrieval, oracle_loss, random_problem, single_state_batch, \
    zero_flow

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = Path(__file__).parent / "golden"
CONFIGS = ROOT / "configs"


def verdict(number, ok, detail):
    record_criterion(number, ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


# 1 ------------------------------------------------------------------------

def test_criterion_1_flow_matching_loss_oracle():
    t0 = time.perf_counter()
    cfg = cf.CFlowNetsConfig(K=1, lam=1.0, epsilon=1.0)
    loss, _ = cf.flow_matching_loss(zero_flow(2, 1), identity_retrieval(2, 1), single_state_batch(np.ones(2), 1.0),
                                    cfg, actions=np.zeros((1, 1, 1)))
    hand_err = abs(loss - (math.log(2) - math.log(3)) ** 2)
    worst = 0.0
    for seed in range(20):
        flow, ret, batch, actions, cfg = random_problem(seed, time_feature=seed >= 15)
        ours, _ = cf.flow_matching_loss(flow, ret, batch, cfg, actions=actions)
        worst = max(worst, abs(ours - oracle_loss(flow, ret, batch, actions, cfg)))
    elapsed = time.perf_counter() - t0
    ok = hand_err < 1e-12 and worst < 1e-9 and elapsed < 1.0
    verdict(1, ok, f"hand case err {hand_err:.1e} (<1e-12), 20 oracle cases max err {worst:.1e} (<1e-9), "
                   f"{elapsed:.2f}s (<1s)")


# 2 ------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    mlp_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        sizes = [int(rng.integers(2, 6)), int(rng.integers(3, 8)), int(rng.integers(3, 8)), int(rng.integers(1, 4))]
        net = init_mlp(sizes, rng, "softplus" if seed % 2 else "identity")
        x, y = rng.normal(size=(5, sizes[0])), rng.normal(size=(5, sizes[-1]))
        out, cache = mlp_forward(net, x)
        grads = mlp_backward(net, cache, mse_loss(out, y)[1])
        numeric = central_difference(lambda: mse_loss(mlp_forward(net, x)[0], y)[0], net.weights + net.biases)
        mlp_worst = max(mlp_worst, max_relative_error(grads.weights + grads.biases, numeric))
    flow_worst = 0.0
    for seed in range(10):
        flow, ret, batch, actions, cfg = random_problem(100 + seed, time_feature=seed % 3 == 0)
        _, grads = cf.flow_matching_loss(flow, ret, batch, cfg, actions=actions)
        numeric = central_difference(lambda: cf.flow_matching_loss(flow, ret, batch, cfg, actions=actions)[0],
                                     flow.net.weights + flow.net.biases)
        flow_worst = max(flow_worst, max_relative_error(grads.weights + grads.biases, numeric))
    elapsed = time.perf_counter() - t0
    ok = mlp_worst < 1e-4 and flow_worst < 1e-4 and elapsed < 30
    verdict(2, ok, f"MLP MSE max rel err {mlp_worst:.1e}, flow loss max rel err {flow_worst:.1e} "
                   f"(<1e-4, 10 configs each), {elapsed:.1f}s (<30s)")


# 3 ------------------------------------------------------------------------

def test_criterion_3_proportional_sampling():
    t0 = time.perf_counter()
    space = cf.ActionSpace((-1.0,), (1.0,))
    rng = np.random.default_rng(0)
    buf = cf.build_action_probability_buffer(AnalyticFlow(), None, space, 20, rng)
    flows = np.exp(AnalyticFlow().log_flow(None, buf.actions))
    target = flows / flows.sum()
    draws = [cf.sample_action(buf, rng)[0] for _ in range(100_000)]
    index = {a: i for i, a in enumerate(buf.actions[:, 0])}
    freq = np.bincount([index[a] for a in draws], minlength=20) / len(draws)
    tv = total_variation(freq, target)
    elapsed = time.perf_counter() - t0
    verdict(3, tv < 0.02 and elapsed < 10, f"TV {tv:.4f} (<0.02) over 1e5 draws, {elapsed:.1f}s (<10s)")


# 4 ------------------------------------------------------------------------

def _random_rollout(arm, steps, seed, hold=1):
    """States visited under uniformly random actions, each held for ``hold`` steps, restarting at episode ends."""
    rng = np.random.default_rng(seed)
    state = reacher.reset(arm, rng)
    states = [state]
    for i in range(steps):
        if state.step_index == arm.horizon:
            state = reacher.reset(arm, rng)
        if i % hold == 0:
            action = rng.uniform(-1, 1, 2)
        state, _ = reacher.step(arm, state, action)
        states.append(state)
    return states


def _coast_steps(arm):
    arm = arm.replace(horizon=10_000)
    state = reacher.EnvState(np.zeros(2), np.array([0.0, 4.0]), np.array([0.1, 0.0]), 0)
    for n in range(1, arm.horizon):
        state, _ = reacher.step(arm, state, np.zeros(2))
        if abs(state.omega[1]) < 0.1:
            return n
    return math.inf


def test_criterion_4_fault_fidelity():
    t0 = time.perf_counter()
    base = reacher.ArmConfig()
    rom = reacher.apply_fault(base, reacher.FaultSpec.reduced_rom())
    # held actions drive the elbow into its limits
    max_elbow = max(abs(s.theta[1]) for hold in (1, 25) for s in _random_rollout(rom, 1000, 0, hold))

    damped = reacher.apply_fault(base, reacher.FaultSpec.increased_damping())
    coast_normal, coast_damped = _coast_steps(base), _coast_steps(damped)

    weak = reacher.apply_fault(base, reacher.FaultSpec.actuator_damage())
    ratio_err = 0.0
    for s in _random_rollout(base, 1000, 1)[::50]:
        rest = reacher.EnvState(s.theta.copy(), np.zeros(2), s.target, 0)
        a_normal = reacher.step(base, rest, np.array([1.0, 0.0]))[0].omega[0] / base.dt
        a_weak = reacher.step(weak, rest, np.array([1.0, 0.0]))[0].omega[0] / base.dt
        ratio_err = max(ratio_err, abs(a_weak / a_normal - 0.5))

    bent = reacher.apply_fault(base, reacher.FaultSpec.structural_damage())
    fk_err = 0.0
    for s in _random_rollout(bent, 1000, 2):
        closed = two_link_tip(s.theta, base.link_lengths, math.pi / 4)
        fk_err = max(fk_err, float(np.max(np.abs(reacher.forward_kinematics(bent, s.theta) - closed))))
    elapsed = time.perf_counter() - t0
    ok = max_elbow <= 1.0 and coast_damped < coast_normal and ratio_err <= 1e-12 and fk_err <= 1e-12 \
        and elapsed < 5
    verdict(4, ok, f"ReducedROM max|theta2| {max_elbow:.4f} (<=1); coast-down {coast_damped} vs {coast_normal} steps; "
                   f"accel ratio err {ratio_err:.1e} (<=1e-12); structural FK err {fk_err:.1e} (<=1e-12); "
                   f"{elapsed:.1f}s (<5s)")


# 5 ------------------------------------------------------------------------

def _preset(name) -> RunManifest:
    return fio.load_config(CONFIGS / name)


def random_sparse_baseline(arm, episodes=1000, seed=12345):
    rec = evaluate_policy(arm, lambda obs, rng, t: rng.uniform(-1, 1, 2), episodes, (seed,))
    sparse = np.asarray(rec.sparse_returns)
    return float(sparse.mean()), float(sparse.std(ddof=1) / math.sqrt(len(sparse)))


@pytest.mark.slow
def test_criterion_5a_cflownets_beats_random():
    manifest = _preset("cflownets_desk.json")
    assert manifest.timestep_budget == 100_000
    base_mean, base_se = random_sparse_baseline(manifest.arm)
    finals = []
    t0 = time.perf_counter()
    for seed in range(3):
        _, evals = run_stage1(manifest.replace(seed=seed))
        finals.append(float(np.mean([np.mean(r.sparse_returns) for r in evals[-5:]])))
    mean = float(np.mean(finals))
    margin = (mean - base_mean) / base_se
    ok = margin >= 3
    detail = (f"5a CFlowNets final-5-eval sparse {mean:.4f} (seeds {', '.join(f'{v:.4f}' for v in finals)}) vs random "
              f"{base_mean:.4f} +- {base_se:.4f}: {margin:.1f} SE (>=3), {time.perf_counter() - t0:.0f}s")
    verdict(5, ok, detail)


@pytest.mark.slow
def test_criterion_5b_td3_reaches_target():
    manifest = _preset("td3_desk.json")
    assert manifest.timestep_budget == 200_000
    t0 = time.perf_counter()
    _, evals = run_stage1(manifest)
    final = evals[-1]
    success = float(np.mean(np.asarray(final.final_distances) < 0.05))
    detail = (f"5b TD3 at {final.timestep} steps: {success:.0%} of {len(final.final_distances)} eval episodes "
              f"within 0.05 m (>=70%), {time.perf_counter() - t0:.0f}s")
    verdict(5, success >= 0.7, detail)


# 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_jumpstart(tmp_path, monkeypatch, capsys):
    stage1 = json.loads((CONFIGS / "td3_jumpstart.json").read_text())
    stage3 = dict(stage1, timestep_budget=stage1["eval_freq"] * (cli.EARLY_EVALS - 1))
    (tmp_path / "s1.json").write_text(json.dumps(stage1))
    (tmp_path / "s3.json").write_text(json.dumps(stage3))
    runs = tmp_path / "runs"
    t0 = time.perf_counter()
    for seed in range(5):
        monkeypatch.setenv(cli.SEED_ENV, str(seed))
        home = runs / f"seed{seed}"
        assert cli.main(["train", "--config", str(tmp_path / "s1.json"), "--out", str(home / "normal")]) == 0
        for mode in ("from-scratch", "params+buffer"):
            assert cli.main(["transfer", "--checkpoint", str(home / "normal" / "checkpoint.bin"), "--fault",
                             "increased-damping", "--mode", mode, "--config", str(tmp_path / "s3.json"),
                             "--out", str(home / mode)]) == 0
    capsys.readouterr()
    assert cli.main(["compare", "--runs", str(runs), "--out", str(tmp_path / "report")]) == 0
    table = json.loads((tmp_path / "report" / "compare.json").read_text())
    rows = {r["transfer_mode"]: r for r in table if r["fault"] == "increased-damping"}
    scratch, transfer = rows["from-scratch"], rows["params+buffer"]
    assert scratch["runs"] == transfer["runs"] == 5
    ok = transfer["early_mean_return"] >= scratch["early_mean_return"]
    verdict(6, ok, f"IncreasedDamping, 5 seeds, mean of first 5 stage-3 evals: params+buffer "
                   f"{transfer['early_mean_return']:.3f} vs from-scratch {scratch['early_mean_return']:.3f}, "
                   f"{time.perf_counter() - t0:.0f}s")


# 7 ------------------------------------------------------------------------

def test_criterion_7_asymptote_detector():
    t0 = time.perf_counter()
    window = 20
    checks = []
    rng = np.random.default_rng(0)
    # plateau starts at eval 60; the first full window inside it ends at 60 + window - 1
    ramp = np.concatenate([np.linspace(-20, -5, 60, endpoint=False), np.full(60, -5.0)])
    rep = detect_asymptote(ramp, window=window, threshold=1e-6)
    checks.append(("ramp", rep.converged and abs(rep.convergence_index - (60 + window - 1)) <= 2,
                   rep.convergence_index))
    noisy = ramp + rng.normal(0, 0.05, ramp.size)
    rep = detect_asymptote(noisy, window=window, threshold=0.01)
    checks.append(("noisy ramp", rep.converged and abs(rep.convergence_index - (60 + window - 1)) <= 2,
                   rep.convergence_index))
    noise = rng.normal(-4.0, 0.5, 100)
    rep = detect_asymptote(noise, window=window, threshold=2 * 0.5 ** 2)
    checks.append(("noise", rep.converged and abs(rep.convergence_index - (window - 1)) <= 2, rep.convergence_index))
    rep = detect_asymptote(np.arange(100.0) ** 1.5, window=window, threshold=1.0)
    checks.append(("growth", not rep.converged, rep.convergence_index))
    monotone = True
    for seed in range(200):
        r = np.random.default_rng(seed)
        series = r.normal(size=60).cumsum() * 0.1
        low = float(r.uniform(1e-4, 0.5))
        a = detect_asymptote(series, window=10, threshold=low)
        b = detect_asymptote(series, window=10, threshold=low * float(r.uniform(1, 10)))
        if a.converged and not (b.converged and b.convergence_index <= a.convergence_index):
            monotone = False
    checks.append(("monotone", monotone, None))
    elapsed = time.perf_counter() - t0
    ok = all(c[1] for c in checks) and elapsed < 1
    detail = ", ".join(f"{name} {'ok' if good else 'bad'}" + (f"@{idx}" if idx is not None else "")
                       for name, good, idx in checks)
    verdict(7, ok, f"{detail}, {elapsed:.2f}s (<1s)")


# 8 ------------------------------------------------------------------------

def test_criterion_8_determinism_and_round_trips(tmp_path):
    t0 = time.perf_counter()
    cfg = {"algorithm": "CFlowNets", "seed": 5, "timestep_budget": 300, "eval_freq": 100, "eval_episodes": 3,
           "cflownets": {"M": 8, "K": 4, "batch_size": 16, "flow_hidden": [16], "retrieval_hidden": [16],
                         "pretrain_samples": 500, "pretrain_epochs": 2, "retrieval_batch": 32,
                         "time_feature": True, "terminal_outflow": False}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / name)]) == 0
    same_csv = (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()
    ckpt = fio.load_checkpoint(tmp_path / "a" / "checkpoint.bin")
    fio.save_checkpoint(ckpt, tmp_path / "again.bin")
    ckpt_ok = fio.load_checkpoint(tmp_path / "again.bin") == ckpt and \
        (tmp_path / "again.bin").read_bytes() == (tmp_path / "a" / "checkpoint.bin").read_bytes()
    config_ok = fio.canonical_config(RunManifest()) == (GOLDEN / "default_config.json").read_text()
    recs = [[EvalRecord(1000 * i, np.array([-10.0 + i + s, -9.0 + i])) for i in range(6)] for s in range(3)]
    svg = learning_curve_svg({"demo": recs, "single": [[EvalRecord(1000 * i, np.array([-8.0])) for i in range(6)]]},
                             window=3, title="golden")
    svg_ok = svg == (GOLDEN / "curves.svg").read_text()
    elapsed = time.perf_counter() - t0
    ok = same_csv and ckpt_ok and config_ok and svg_ok and elapsed < 30
    verdict(8, ok, f"identical eval CSVs {same_csv}, checkpoint round trip {ckpt_ok}, golden config {config_ok}, "
                   f"golden SVG {svg_ok}, {elapsed:.1f}s (<30s)")
