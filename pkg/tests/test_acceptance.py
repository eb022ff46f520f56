"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The two policy-ordering criteria train 20 full PPO runs and the OOD criteria
share one encoder pre-trained on 1 to 3 agents; expect about two hours on a
single core.
"""
import json
from pathlib import Path

import numpy as np
import pytest

from agnocomm import checkpoint
from agnocomm.cli import aggregate_rows, main, read_metrics
from agnocomm.env import EnvConfig
from agnocomm.nn import Mlp, finite_diff_check, init_mlp, mse_loss
from agnocomm.ood import assess, fit_threshold
from agnocomm.pisa import (
    AeTrainConfig,
    SetAutoencoder,
    SetBatch,
    encode,
    encoder_tensors,
    evaluate,
    init_autoencoder,
    loss_and_grad,
    train,
)
from agnocomm.ppo import (
    Minibatch,
    PolicyParams,
    TrainConfig,
    act,
    final_decile_mean,
    gae,
    gaussian_log_prob,
    init_policy,
    ppo_surrogate,
    surrogate_through_encoder,
    train_arm,
)
from agnocomm.pretrain import AutoencoderConfig, collect_random_observations, collect_random_policy, pretrain

from conftest import random_sets, report_criterion
from test_pretrain import PoisonedWorld

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
POLICY = TrainConfig()            # 60 iterations x 6000 steps = 360k env steps
SHORT = TrainConfig(iterations=10)
FD_INSTANCES = 20


# ---------------------------------------------------------------- 1, 2

def test_01_permutation_invariance():
    rng = np.random.default_rng(0)
    ae = init_autoencoder(rng, d_obs=8, d_z=72, n_max=10, hidden=64)
    worst = 0.0
    for x in random_sets(rng, 1000, 8, 0, 10):
        z = encode(ae, x)
        zp = encode(ae, x[rng.permutation(len(x))])
        worst = max(worst, float(np.max(np.abs(z - zp))))
    ok = worst <= 1e-12
    report_criterion(1, "permutation invariance", ok, f"max |z - z_perm| = {worst:.3g} over 1000 sets (<= 1e-12)")
    assert ok


def test_02_fixed_size_latent():
    rng = np.random.default_rng(1)
    ae = init_autoencoder(rng, d_obs=28, d_z=72, n_max=10)
    dims = {encode(ae, rng.uniform(-1, 1, size=(n, 28))).shape for n in range(11)}
    ok = dims == {(72,)}
    report_criterion(2, "fixed-size latent", ok, f"latent shapes for n = 0..10: {sorted(dims)}")
    assert ok


# ---------------------------------------------------------------- 3, 4

def _mlp_case(seed):
    rng = np.random.default_rng(seed)
    hidden = ("relu", "tanh")[seed % 2]
    mlp = init_mlp(rng, [4, 6, 5, 3], hidden=hidden)
    x, target = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))

    def f(params):
        m = Mlp.from_tensors(params, "m", mlp.activations)
        y, tape = m.forward(x)
        loss, dy = mse_loss(y, target)
        return loss, m.backward(tape, dy)[0].tensors("m")
    return f, mlp.tensors("m")


def _pisa_case(seed):
    rng = np.random.default_rng(seed)
    ae = init_autoencoder(rng, d_obs=3, d_z=5, n_max=4, hidden=6, d_key=4)
    batch = SetBatch.from_sets(random_sets(rng, 4, 3, 0, 4), 3)

    def f(params):
        loss, grads = loss_and_grad(SetAutoencoder.from_tensors(params), batch)
        return loss.total, grads
    return f, ae.tensors()


def _ppo_batch(rng, params, n=6):
    x = rng.normal(size=(n, params.in_dim))
    actions, _, _, means = act(params, x, rng)
    mean_old = means + 0.05 * rng.normal(size=means.shape)
    log_std_old = params.log_std + 0.1 * rng.normal(size=params.log_std.shape)
    logp_old = gaussian_log_prob(actions, mean_old, log_std_old)
    return Minibatch(x, actions, logp_old, mean_old, log_std_old, rng.normal(size=n), rng.normal(size=n))


def _ppo_case(seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(entropy_coeff=0.01)
    params = init_policy(rng, 5, hidden=6, log_std_init=-0.3)
    params = PolicyParams.from_tensors({k: v + 0.3 * rng.normal(size=v.shape) for k, v in params.tensors().items()})
    mb = _ppo_batch(rng, params)

    def f(tensors):
        stats, grads, _ = ppo_surrogate(mb, PolicyParams.from_tensors(tensors), cfg, 0.3)
        return stats.loss, grads
    return f, params.tensors()


def _ppo_encoder_case(seed):
    rng = np.random.default_rng(seed)
    ae = init_autoencoder(rng, d_obs=3, d_z=4, n_max=4, hidden=5, d_key=4)
    sets = SetBatch.from_sets(random_sets(rng, 5, 3, 1, 3), 3)
    own = rng.normal(size=(5, 3))
    params = init_policy(rng, 7, hidden=6)
    params = PolicyParams.from_tensors({k: v + 0.3 * rng.normal(size=v.shape) for k, v in params.tensors().items()})
    mb = _ppo_batch(rng, params, 5)
    base = ae.tensors()

    def f(enc):
        merged = dict(base)
        merged.update(enc)
        stats, _, eg = surrogate_through_encoder(SetAutoencoder.from_tensors(merged), sets, own, mb, params,
                                                 TrainConfig(), 0.2)
        return stats.loss, eg
    return f, encoder_tensors(ae)


def test_03_gradient_suite():
    suites = {"mlp": _mlp_case, "pisa": _pisa_case, "ppo": _ppo_case, "ppo_encoder": _ppo_encoder_case}
    worst = {}
    for name, make in suites.items():
        errs = []
        for i in range(FD_INSTANCES):
            f, params = make(1000 + i)
            errs.append(finite_diff_check(f, params))
        worst[name] = max(errs)
    ok = all(v < 1e-4 for v in worst.values())
    detail = ", ".join(f"{k} {v:.2g}" for k, v in worst.items())
    report_criterion(3, "gradient suite", ok, f"worst rel err over {FD_INSTANCES} instances each: {detail} (< 1e-4)")
    assert ok


def _double_sum_gae(r, v, d, last, gamma, lam):
    """A_t = sum_k (gamma lam)^(k-t) delta_k, truncated after the first terminal step."""
    T = len(r)
    v_next = np.append(v[1:], last)
    delta = [r[k] + gamma * v_next[k] * (1.0 - d[k]) - v[k] for k in range(T)]
    out = np.zeros(T)
    for t in range(T):
        for k in range(t, T):
            alive = all(d[j] == 0 for j in range(t, k))
            if not alive:
                break
            out[t] += (gamma * lam) ** (k - t) * delta[k]
    return out


def test_04_gae_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        r, v = rng.normal(size=20), rng.normal(size=20)
        d = (rng.random(20) < 0.1).astype(float)
        last = float(rng.normal())
        adv, _ = gae(r, v, d, last, 0.99, 0.9)
        worst = max(worst, float(np.max(np.abs(adv - _double_sum_gae(r, v, d, last, 0.99, 0.9)))))
    ok = worst < 1e-10
    report_criterion(4, "GAE oracle", ok, f"max abs err over 100 x 20 steps = {worst:.3g} (< 1e-10)")
    assert ok


# ---------------------------------------------------------------- 5, 6

def test_05_autoencoder_convergence():
    rng = np.random.default_rng(1)

    def sets(n):
        return SetBatch.from_sets([rng.uniform(-1, 1, size=(int(rng.integers(1, 6)), 8)) for _ in range(n)], 8)

    train_sets, held_out = sets(20000), sets(2000)
    ae = init_autoencoder(np.random.default_rng(0), 8, d_z=72, n_max=10, hidden=128)
    result = train(ae, train_sets, AeTrainConfig(iterations=15000))
    m = evaluate(result.params, held_out)
    ok = m["rmse"] < 0.05 and m["card_accuracy"] >= 0.99
    report_criterion(5, "autoencoder convergence", ok,
                     f"held-out RMSE {m['rmse']:.4f} (< 0.05), cardinality accuracy {m['card_accuracy']:.4f} "
                     f"(>= 0.99) after 15000 iterations")
    assert ok


def test_06_reward_freeness():
    env = EnvConfig(n_agents=3)
    clean = collect_random_policy(env, 20000, [1, 2, 3], seed=6)
    poisoned = collect_random_policy(env, 20000, [1, 2, 3], seed=6, world_factory=PoisonedWorld)
    same_data = checkpoint.dumps(clean.tensors()) == checkpoint.dumps(poisoned.tensors())
    cfg = AutoencoderConfig(iterations=1000)
    a, b = pretrain(clean, cfg), pretrain(poisoned, cfg)
    same_weights = checkpoint.dumps(a.params.tensors()) == checkpoint.dumps(b.params.tensors())
    ok = same_data and same_weights
    report_criterion(6, "reward-freeness", ok,
                     f"dataset bit-identical: {same_data}, weights bit-identical: {same_weights}")
    assert ok


# ---------------------------------------------------------------- shared encoder and policy runs

@pytest.fixture(scope="module")
def encoder123():
    """Encoder pre-trained reward-free on 1, 2 and 3 agent observation sets."""
    ds = collect_random_observations(EnvConfig(n_agents=3), 100000, [1, 2, 3], seed=0)
    report = pretrain(ds, AutoencoderConfig())
    return report.params, fit_threshold(report)


_RUNS: dict = {}


def _run(arm, n_agents, seed, config, encoder=None, noise_agent=None):
    key = (arm, n_agents, seed, config.iterations, noise_agent)
    if key not in _RUNS:
        _RUNS[key] = train_arm(EnvConfig(n_agents=n_agents), "discovery", arm, config, seed,
                               autoencoder=encoder, noise_agent=noise_agent)
    return _RUNS[key]


def _ordering(encoder, n_agents):
    rows = []
    for s in SEEDS:
        ta = final_decile_mean(_run("task_agnostic", n_agents, s, POLICY, encoder).returns)
        nc = final_decile_mean(_run("no_comms", n_agents, s, POLICY).returns)
        rows.append((s, ta, nc))
    wins = sum(ta > nc for _, ta, nc in rows)
    detail = "; ".join(f"seed {s}: {ta:.3f} vs {nc:.3f}" for s, ta, nc in rows)
    return wins, detail


def test_07_novel_task_ordering(encoder123):
    ae, _ = encoder123
    wins, detail = _ordering(ae, 3)
    steps = POLICY.iterations * POLICY.train_batch
    ok = wins >= 4
    report_criterion(7, "task_agnostic > no_comms, 3 agents", ok,
                     f"{wins}/5 seeds ({steps} env steps each); final-decile task_agnostic vs no_comms: {detail}")
    assert ok


def test_08_ood_agent_counts(encoder123):
    ae, cal = encoder123
    three = assess(_run("task_agnostic", 3, 0, SHORT, ae).recorder.window, cal)
    five = assess(_run("task_agnostic", 5, 0, SHORT, ae).recorder.window, cal)
    ok = (not three.is_ood) and five.is_ood
    report_criterion(8, "OOD agent counts", ok,
                     f"threshold {cal.threshold:.4g}; window mean 3 agents {three.window_mean_loss:.4g} (below), "
                     f"5 agents {five.window_mean_loss:.4g} (above)")
    assert ok


def test_09_ood_noise_observations(encoder123):
    ae, cal = encoder123
    control = assess(_run("task_agnostic", 3, 0, SHORT, ae).recorder.window, cal)
    noisy = assess(_run("task_agnostic", 3, 0, SHORT, ae, noise_agent=0).recorder.window, cal)
    ok = noisy.is_ood and not control.is_ood
    report_criterion(9, "OOD noise observations", ok,
                     f"threshold {cal.threshold:.4g}; noise agent {noisy.window_mean_loss:.4g} (above), "
                     f"control {control.window_mean_loss:.4g} (below)")
    assert ok


def test_10_ood_cardinality_policy(encoder123):
    ae, _ = encoder123
    wins, detail = _ordering(ae, 4)
    ok = wins >= 4
    report_criterion(10, "4 agents on {1,2,3} encoder > no_comms", ok,
                     f"{wins}/5 seeds; final-decile task_agnostic vs no_comms: {detail}")
    assert ok


# ---------------------------------------------------------------- 11

DETERMINISM_CONFIG = """\
collect.mode: random_policy
collect.samples: 600
collect.agent_counts: [1, 2, 3]
env.n_agents: 3
env.episode_length: 20
ae.iterations: 300
ae.batch_size: 32
ae.hidden: 16
ae.d_z: 8
ae.d_key: 4
ae.n_max: 5
run.task: discovery
run.arm: task_agnostic
run.eval_episodes: 3
train.iterations: 3
train.train_batch: 80
train.rollout_fragment: 20
train.minibatch: 40
train.sgd_epochs: 2
train.hidden: 16
train.seeds: [0, 1, 2]
"""


def _pipeline(root: Path) -> None:
    cfg = root / "run.yaml"
    cfg.write_text(DETERMINISM_CONFIG
                   + f"run.dataset: {root / 'collect' / 'dataset.agno'}\n"
                   + f"run.encoder: {root / 'pretrain' / 'checkpoints' / 'autoencoder.agno'}\n"
                   + f"run.calibration: {root / 'pretrain' / 'calibration.json'}\n")
    for stage in ("collect", "pretrain", "train"):
        assert main([stage, "--config", str(cfg), "--out", str(root / stage)]) == 0
    assert main(["eval", "--out", str(root / "train")]) == 0


def _artifacts(root: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "run.yaml", "config.snapshot"):
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


def _manifest_artifacts(path: Path) -> tuple:
    # config hashes differ between the two roots since run paths are part of the config
    m = json.loads(path.read_text())
    return m["version"], {k: v["artifacts"] for k, v in m["stages"].items()}


def test_11_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a)
    _pipeline(b)
    fa, fb = _artifacts(a), _artifacts(b)
    differing = sorted(k for k in fa if fa[k] != fb.get(k)) + sorted(set(fb) - set(fa))
    manifests_equal = all(_manifest_artifacts(a / s / "manifest.json")
                          == _manifest_artifacts(b / s / "manifest.json")
                          for s in ("collect", "pretrain", "train"))
    metrics = a / "train" / "metrics"
    per_seed = [read_metrics(metrics / f"seed_{s}.csv") for s in range(3)]
    stored = np.loadtxt(metrics / "aggregate.csv", delimiter=",", skiprows=1, ndmin=2)
    recomputed = np.array([[float(x) for x in row] for row in aggregate_rows(per_seed)])
    vals = np.array([[float(m["mean_return"][i]) for m in per_seed] for i in range(len(stored))])
    independent = np.column_stack([vals.mean(axis=1), np.percentile(vals, 2.5, axis=1),
                                   np.percentile(vals, 97.5, axis=1)])
    agg_err = max(float(np.max(np.abs(stored - recomputed))),
                  float(np.max(np.abs(stored[:, 2:5] - independent))))
    ok = not differing and manifests_equal and agg_err <= 1e-12 and len(fa) > 0
    report_criterion(11, "determinism", ok,
                     f"{len(fa)} artifacts compared, {len(differing)} differ {differing[:3]}; "
                     f"aggregate recompute err {agg_err:.3g} (<= 1e-12)")
    assert ok
