"""
Independent PPO with a policy shared by all agents.

Each agent acts on ``[latent || own observation]``, where the latent comes
from the communication layer (or is all zeros for the ``no_comms`` arm).
The policy is a diagonal Gaussian whose mean is an MLP output and whose
log-std is a free parameter vector clamped to ``[-5, 2]``. The loss is the
clipped surrogate plus an adaptive KL(old || new) penalty, an unclipped
value MSE and an optional entropy bonus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .comms import CommLayer, LossRecorder
from .env import EnvConfig, ForageWorld, TaskId
from .errors import ConfigurationError, NumericalError
from .nn import Mlp, Tensors, adam_init, adam_step, init_mlp, tensors_checksum
from .ood import inject_noise_observation
from .pisa import SetAutoencoder, SetBatch, encode_backward, encode_batch, encoder_tensors, init_autoencoder

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)


class ArmId(str, Enum):
    TASK_AGNOSTIC = "task_agnostic"
    TASK_SPECIFIC = "task_specific"
    NO_COMMS = "no_comms"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.9
    clip: float = 0.2
    lr: float = 5e-5
    kl_coeff: float = 0.01
    kl_target: float = 0.01
    entropy_coeff: float = 0.0
    vf_coeff: float = 1.0
    train_batch: int = 6000
    minibatch: int = 512
    sgd_epochs: int = 10
    iterations: int = 60
    rollout_fragment: int = 125
    hidden: int = 256
    log_std_init: float = 0.0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigurationError("gae_lambda must be in [0, 1]")
        if not self.clip > 0:
            raise ConfigurationError("clip must be > 0")
        if self.train_batch < self.rollout_fragment or self.train_batch % self.rollout_fragment:
            raise ConfigurationError("train_batch must be a positive multiple of rollout_fragment")
        if self.minibatch < 1 or self.iterations < 1 or self.sgd_epochs < 1:
            raise ConfigurationError("minibatch, iterations and sgd_epochs must be >= 1")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")

    @property
    def n_envs(self) -> int:
        return self.train_batch // self.rollout_fragment


# --------------------------------------------------------------------------
# policy

@dataclass(frozen=True)
class PolicyParams:
    policy: Mlp
    value: Mlp
    log_std: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.policy.in_dim

    @property
    def action_dim(self) -> int:
        return self.policy.out_dim

    def tensors(self) -> Tensors:
        out = self.policy.tensors("policy")
        out.update(self.value.tensors("value"))
        out["log_std"] = self.log_std
        return out

    @classmethod
    def from_tensors(cls, tensors) -> PolicyParams:
        def mlp(prefix):
            depth = len({k.split(".")[1] for k in tensors if k.startswith(prefix + ".")})
            if depth == 0:
                raise ConfigurationError(f"missing tensors for {prefix}")
            return Mlp.from_tensors(tensors, prefix, ["tanh"] * (depth - 1) + ["identity"])

        if "log_std" not in tensors:
            raise ConfigurationError("missing tensor log_std")
        return cls(mlp("policy"), mlp("value"), np.asarray(tensors["log_std"], dtype=np.float64))


def init_policy(rng: np.random.Generator, in_dim: int, action_dim: int = 2, hidden: int = 256,
                log_std_init: float = 0.0) -> PolicyParams:
    """Policy and value MLPs with one tanh hidden layer; last layers ~ N(0, 0.01²)."""
    return PolicyParams(
        policy=init_mlp(rng, [in_dim, hidden, action_dim], hidden="tanh", final_std=0.01),
        value=init_mlp(rng, [in_dim, hidden, 1], hidden="tanh", final_std=0.01),
        log_std=np.full(action_dim, float(log_std_init)),
    )


def clamped_log_std(params: PolicyParams) -> np.ndarray:
    return np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * (z * z).sum(-1) - log_std.sum() - 0.5 * actions.shape[-1] * LOG_2PI


def act(params: PolicyParams, inputs: np.ndarray, rng: np.random.Generator | None
        ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Sample (or take the mean action when ``rng`` is None).

    Returns ``(actions, log_probs, values, means)``.
    """
    mean = params.policy(inputs)
    values = params.value(inputs)[..., 0]
    log_std = clamped_log_std(params)
    if rng is None:
        actions = mean
    else:
        actions = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return actions, gaussian_log_prob(actions, mean, log_std), values, mean


# --------------------------------------------------------------------------
# advantages

def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, last_values: np.ndarray,
        gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates along axis 0.

    ``rewards``, ``values`` and ``dones`` are ``(T, ...)``; ``last_values`` is the
    bootstrap value of the state after step ``T-1`` (ignored where that step
    ended an episode). Returns ``(advantages, value_targets)``, unnormalised.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=np.float64)
    running = np.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    std = adv.std()
    return adv / std if std > 0 else adv


# --------------------------------------------------------------------------
# surrogate loss

@dataclass(frozen=True)
class Minibatch:
    inputs: np.ndarray       # (B, in_dim)
    actions: np.ndarray      # (B, action_dim)
    logp_old: np.ndarray     # (B,)
    mean_old: np.ndarray     # (B, action_dim)
    log_std_old: np.ndarray  # (action_dim,)
    advantages: np.ndarray   # (B,)
    value_targets: np.ndarray  # (B,)

    def take(self, idx: np.ndarray) -> Minibatch:
        return Minibatch(self.inputs[idx], self.actions[idx], self.logp_old[idx], self.mean_old[idx],
                         self.log_std_old, self.advantages[idx], self.value_targets[idx])

    def __len__(self) -> int:
        return len(self.logp_old)


@dataclass(frozen=True)
class SurrogateStats:
    loss: float
    policy_loss: float
    value_loss: float
    kl: float
    entropy: float
    ratio_max_dev: float
    clip_fraction: float


def ppo_surrogate(batch: Minibatch, params: PolicyParams, config: TrainConfig, kl_coeff: float,
                  need_input_grad: bool = False) -> tuple[SurrogateStats, Tensors, np.ndarray | None]:
    """Clipped surrogate + KL penalty + value loss - entropy bonus, with gradients.

    Returns ``(stats, parameter gradients, input gradient or None)``.
    """
    bsz = len(batch)
    mean, ptape = params.policy.forward(batch.inputs)
    vout, vtape = params.value.forward(batch.inputs)
    values = vout[:, 0]
    log_std = clamped_log_std(params)
    std_inv = np.exp(-log_std)
    diff = batch.actions - mean
    z = diff * std_inv
    logp = -0.5 * (z * z).sum(-1) - log_std.sum() - 0.5 * mean.shape[1] * LOG_2PI
    ratio = np.exp(logp - batch.logp_old)
    adv = batch.advantages
    lo, hi = 1.0 - config.clip, 1.0 + config.clip
    clipped = np.clip(ratio, lo, hi)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -surr.mean()

    var_old = np.exp(2.0 * batch.log_std_old)
    var_new = np.exp(2.0 * log_std)
    dmu = mean - batch.mean_old
    kl_rows = (log_std - batch.log_std_old + (var_old + dmu * dmu) / (2.0 * var_new) - 0.5).sum(-1)
    kl = kl_rows.mean()
    entropy = float((log_std + 0.5 * (1.0 + LOG_2PI)).sum())
    vdiff = values - batch.value_targets
    value_loss = float((vdiff * vdiff).mean())
    loss = policy_loss + kl_coeff * kl + config.vf_coeff * value_loss - config.entropy_coeff * entropy
    if not np.isfinite(loss):
        raise NumericalError("PPO surrogate loss is not finite")

    # d loss / d logp
    active = (ratio * adv <= clipped * adv) | ((ratio > lo) & (ratio < hi))
    dlogp = -np.where(active, adv * ratio, 0.0) / bsz
    # logp -> mean, log_std
    dmean = dlogp[:, None] * diff * std_inv * std_inv
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(0)
    # KL -> mean, log_std
    dmean += kl_coeff * dmu / var_new / bsz
    dlog_std += kl_coeff * (1.0 - (var_old + dmu * dmu) / var_new).mean(0)
    dlog_std -= config.entropy_coeff * np.ones_like(log_std)
    dlog_std = np.where((params.log_std > LOG_STD_MIN) & (params.log_std < LOG_STD_MAX), dlog_std, 0.0)
    dvalues = (config.vf_coeff * 2.0 * vdiff / bsz)[:, None]

    g_pol, dx_pol = params.policy.backward(ptape, dmean)
    g_val, dx_val = params.value.backward(vtape, dvalues)
    grads = g_pol.tensors("policy")
    grads.update(g_val.tensors("value"))
    grads["log_std"] = dlog_std
    stats = SurrogateStats(
        loss=float(loss), policy_loss=float(policy_loss), value_loss=value_loss, kl=float(kl),
        entropy=entropy, ratio_max_dev=float(np.abs(ratio - 1.0).max()) if bsz else 0.0,
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > config.clip)) if bsz else 0.0,
    )
    return stats, grads, (dx_pol + dx_val) if need_input_grad else None


def surrogate_through_encoder(ae: SetAutoencoder, sets: SetBatch, own_obs: np.ndarray, batch: Minibatch,
                              params: PolicyParams, config: TrainConfig, kl_coeff: float
                              ) -> tuple[SurrogateStats, Tensors, Tensors]:
    """PPO loss with the latent recomputed from ``sets`` so the encoder gets gradients.

    ``batch.inputs`` is ignored and rebuilt as ``[encode(sets) || own_obs]``.
    Returns ``(stats, policy gradients, encoder gradients)``.
    """
    z, tape = encode_batch(ae, sets)
    inputs = np.concatenate([z, own_obs], axis=-1)
    stats, grads, dx = ppo_surrogate(replace(batch, inputs=inputs), params, config, kl_coeff,
                                     need_input_grad=True)
    enc_grads = encode_backward(ae, tape, dx[:, : ae.d_z])
    return stats, grads, enc_grads


def adapt_kl_coeff(kl_coeff: float, kl: float, target: float) -> float:
    if kl > 2.0 * target:
        return kl_coeff * 1.5
    if kl < 0.5 * target:
        return kl_coeff * 0.5
    return kl_coeff


# --------------------------------------------------------------------------
# rollouts

@dataclass
class RolloutBatch:
    """Samples laid out as ``(T, E, n, ...)``."""

    observations: np.ndarray
    latents: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    means: np.ndarray
    log_std: np.ndarray
    sets: SetBatch | None = None
    episode_returns: list[float] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return int(np.prod(self.log_probs.shape))

    def flat(self, advantages: np.ndarray, targets: np.ndarray) -> Minibatch:
        n = self.n_samples
        inputs = np.concatenate([self.latents, self.observations], axis=-1)
        return Minibatch(inputs.reshape(n, -1), self.actions.reshape(n, -1), self.log_probs.reshape(n),
                         self.means.reshape(n, -1), self.log_std, advantages.reshape(n), targets.reshape(n))


class RolloutRunner:
    """Keeps a batch of worlds alive across iterations and collects fragments."""

    def __init__(self, world: ForageWorld, arm: ArmId, comm: CommLayer | None, d_z: int,
                 rng: np.random.Generator, noise_agent: int | None = None, keep_sets: bool = False):
        self.world = world
        self.arm = ArmId(arm)
        if self.arm is not ArmId.NO_COMMS and comm is None:
            raise ConfigurationError(f"arm {self.arm.value} needs a communication layer")
        self.comm = comm
        self.d_z = d_z
        self.rng = rng
        self.noise_agent = noise_agent
        self.keep_sets = keep_sets
        _, obs = world.reset()
        self.obs = self._corrupt(obs)
        self.running_return = np.zeros(world.n_envs)

    def _corrupt(self, obs: np.ndarray) -> np.ndarray:
        if self.noise_agent is None:
            return obs
        return inject_noise_observation(obs, self.noise_agent, self.rng)

    def latents(self, obs: np.ndarray) -> tuple[np.ndarray, SetBatch | None]:
        e, n = obs.shape[:2]
        if self.arm is ArmId.NO_COMMS:
            return np.zeros((e, n, self.d_z)), None
        from .comms import assemble_batch

        sets = assemble_batch(obs, obs[..., :2], self.comm.epsilon)
        z = self.comm.encode_sets(sets).reshape(e, n, self.d_z)
        return z, sets

    def collect(self, params: PolicyParams, length: int) -> RolloutBatch:
        e, n = self.world.n_envs, self.world.n_agents
        d = self.world.obs_dim
        obs_buf = np.zeros((length, e, n, d))
        lat_buf = np.zeros((length, e, n, self.d_z))
        act_buf = np.zeros((length, e, n, params.action_dim))
        mean_buf = np.zeros_like(act_buf)
        logp_buf = np.zeros((length, e, n))
        val_buf = np.zeros((length, e, n))
        rew_buf = np.zeros((length, e, n))
        done_buf = np.zeros((length, e, n), dtype=bool)
        set_elems, set_counts = [], []
        returns: list[float] = []
        for t in range(length):
            z, sets = self.latents(self.obs)
            x = np.concatenate([z, self.obs], axis=-1).reshape(e * n, -1)
            actions, logp, values, means = act(params, x, self.rng)
            _, next_obs, reward, done = self.world.step(actions.reshape(e, n, -1))
            obs_buf[t] = self.obs
            lat_buf[t] = z
            act_buf[t] = actions.reshape(e, n, -1)
            mean_buf[t] = means.reshape(e, n, -1)
            logp_buf[t] = logp.reshape(e, n)
            val_buf[t] = values.reshape(e, n)
            rew_buf[t] = reward[:, None]
            done_buf[t] = done[:, None]
            if self.keep_sets and sets is not None:
                set_elems.append(sets.elements)
                set_counts.append(sets.counts)
            self.running_return += reward
            if np.any(done):
                returns.extend(self.running_return[done].tolist())
                self.running_return[done] = 0.0
                next_obs = self.world.reset_done(done)
            self.obs = self._corrupt(next_obs)
        z, _ = self.latents(self.obs)
        x = np.concatenate([z, self.obs], axis=-1).reshape(e * n, -1)
        last_values = params.value(x)[:, 0].reshape(e, n)
        sets = None
        if set_elems:
            sets = SetBatch(np.concatenate(set_elems), np.concatenate(set_counts))
        return RolloutBatch(obs_buf, lat_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf, last_values,
                            mean_buf, clamped_log_std(params).copy(), sets, returns)


def rollout(env: ForageWorld, arm: ArmId, params: PolicyParams, comm: CommLayer | None,
            fragment_len: int, rng: np.random.Generator, d_z: int | None = None) -> RolloutBatch:
    """Collect one fragment from a freshly reset world."""
    d_z = d_z if d_z is not None else (comm.d_z if comm is not None else 0)
    return RolloutRunner(env, arm, comm, d_z, rng).collect(params, fragment_len)


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    env_steps: int
    mean_return: float
    return_p2_5: float
    return_p97_5: float
    recon_rmse_mean: float
    recon_loss_mean: float
    kl: float
    entropy: float
    kl_coeff: float
    first_ratio_dev: float


@dataclass(frozen=True)
class TrainResult:
    params: PolicyParams
    metrics: list[IterationMetrics]
    recorder: LossRecorder | None
    encoder: SetAutoencoder | None
    encoder_checksum_before: str | None
    encoder_checksum_after: str | None

    @property
    def returns(self) -> np.ndarray:
        return np.array([m.mean_return for m in self.metrics])


def _seed_streams(seed: int) -> tuple[np.random.Generator, int, np.random.Generator, np.random.Generator]:
    ss = np.random.SeedSequence(seed).spawn(4)
    env_seed = int(ss[1].generate_state(1)[0])
    return (np.random.default_rng(ss[0]), env_seed, np.random.default_rng(ss[2]),
            np.random.default_rng(ss[3]))


def train_arm(env_config: EnvConfig, task: TaskId | str, arm: ArmId | str, config: TrainConfig, seed: int,
              autoencoder: SetAutoencoder | None = None, d_z: int = 72, epsilon: float = math.inf,
              n_agents: int | None = None, train_encoder: bool = False, noise_agent: int | None = None,
              callback: Callable[[IterationMetrics], None] | None = None) -> TrainResult:
    """Train a shared policy with PPO on one task and arm.

    ``task_agnostic`` and ``task_specific`` need ``autoencoder``; it stays frozen
    unless ``train_encoder`` is set (used to build the task-specific encoder).
    """
    arm = ArmId(arm)
    if arm is not ArmId.NO_COMMS and autoencoder is None:
        raise ConfigurationError(f"arm {arm.value} requires a pre-trained autoencoder checkpoint")
    if train_encoder and arm is ArmId.NO_COMMS:
        raise ConfigurationError("no_comms has no encoder to train")
    if autoencoder is not None:
        d_z = autoencoder.d_z
        if autoencoder.d_obs != env_config.obs_dim:
            raise ConfigurationError("autoencoder d_obs does not match the environment observation")
    init_rng, env_seed, act_rng, sgd_rng = _seed_streams(seed)
    params = init_policy(init_rng, d_z + env_config.obs_dim, 2, config.hidden, config.log_std_init)
    world = ForageWorld(env_config, task, n_envs=config.n_envs, seed=env_seed, n_agents=n_agents)
    comm = CommLayer(autoencoder) if autoencoder is not None else None
    if comm is not None:
        comm.epsilon = epsilon
    runner = RolloutRunner(world, arm, comm, d_z, act_rng, noise_agent, keep_sets=train_encoder)
    checksum_before = tensors_checksum(encoder_tensors(autoencoder)) if autoencoder is not None else None

    p_tensors = params.tensors()
    p_state = adam_init(p_tensors, config.lr)
    enc = autoencoder
    e_tensors = encoder_tensors(enc) if train_encoder else None
    e_state = adam_init(e_tensors, config.lr) if train_encoder else None
    kl_coeff = config.kl_coeff
    metrics: list[IterationMetrics] = []
    env_steps = 0
    for it in range(config.iterations):
        batch = runner.collect(params, config.rollout_fragment)
        env_steps += config.rollout_fragment * world.n_envs
        adv, targets = gae(batch.rewards, batch.values, batch.dones, batch.last_values,
                           config.gamma, config.gae_lambda)
        flat = batch.flat(normalize(adv), targets)
        own_obs = batch.observations.reshape(flat.inputs.shape[0], -1)
        n = len(flat)
        first_dev = float("nan")
        for epoch in range(config.sgd_epochs):
            perm = sgd_rng.permutation(n)
            for start in range(0, n, config.minibatch):
                idx = perm[start:start + config.minibatch]
                mb = flat.take(idx)
                if train_encoder:
                    stats, grads, egrads = surrogate_through_encoder(
                        enc, batch.sets.take(idx), own_obs[idx], mb, params, config, kl_coeff)
                    e_tensors, e_state = adam_step(e_tensors, egrads, e_state)
                    enc = enc.with_tensors(e_tensors)
                else:
                    stats, grads, _ = ppo_surrogate(mb, params, config, kl_coeff)
                if epoch == 0 and start == 0:
                    first_dev = stats.ratio_max_dev
                p_tensors, p_state = adam_step(p_tensors, grads, p_state)
                params = PolicyParams.from_tensors(p_tensors)
        if train_encoder:
            comm.autoencoder = enc
            z, _ = encode_batch(enc, batch.sets)
            flat = replace(flat, inputs=np.concatenate([z, own_obs], axis=-1))
        full, _, _ = ppo_surrogate(flat, params, config, kl_coeff)
        kl_coeff = adapt_kl_coeff(kl_coeff, full.kl, config.kl_target)

        recon_loss = recon_rmse = float("nan")
        if comm is not None:
            recon_loss = comm.recorder.close_iteration()
            recon_rmse = comm.recorder.rmse_history[-1]
        rets = np.asarray(batch.episode_returns)
        m = IterationMetrics(
            iteration=it, env_steps=env_steps,
            mean_return=float(rets.mean()) if rets.size else float("nan"),
            return_p2_5=float(np.percentile(rets, 2.5)) if rets.size else float("nan"),
            return_p97_5=float(np.percentile(rets, 97.5)) if rets.size else float("nan"),
            recon_rmse_mean=recon_rmse, recon_loss_mean=recon_loss, kl=full.kl, entropy=full.entropy,
            kl_coeff=kl_coeff, first_ratio_dev=first_dev,
        )
        metrics.append(m)
        if callback is not None:
            callback(m)
    checksum_after = tensors_checksum(encoder_tensors(enc)) if enc is not None else None
    return TrainResult(params, metrics, comm.recorder if comm else None, enc, checksum_before, checksum_after)


def train_task_specific_source(env_config: EnvConfig, source_task: TaskId | str, config: TrainConfig,
                               seed: int, ae_shape: dict | None = None,
                               n_agents: int | None = None) -> SetAutoencoder:
    """Learn an encoder end-to-end through PPO on ``source_task``; the policy is discarded."""
    shape = {"d_z": 72, "n_max": 10, "hidden": 128, "d_key": 16}
    shape.update(ae_shape or {})
    ae = init_autoencoder(np.random.default_rng(np.random.SeedSequence([seed, 1])), env_config.obs_dim, **shape)
    result = train_arm(env_config, source_task, ArmId.TASK_SPECIFIC, config, seed, autoencoder=ae,
                       n_agents=n_agents, train_encoder=True)
    return result.encoder


# --------------------------------------------------------------------------
# evaluation

def evaluate_policy(params: PolicyParams, env_config: EnvConfig, task: TaskId | str, arm: ArmId | str,
                    episodes: int, seed: int, autoencoder: SetAutoencoder | None = None, d_z: int = 72,
                    n_agents: int | None = None) -> float:
    """Mean return of the deterministic (mean-action) policy over ``episodes`` episodes."""
    arm = ArmId(arm)
    comm = None
    if arm is not ArmId.NO_COMMS:
        if autoencoder is None:
            raise ConfigurationError(f"arm {arm.value} requires an autoencoder")
        comm = CommLayer(autoencoder, record_losses=False)
        d_z = autoencoder.d_z
    world = ForageWorld(env_config, task, n_envs=episodes, seed=seed, n_agents=n_agents)
    runner = RolloutRunner(world, arm, comm, d_z, np.random.default_rng(seed))
    finished = np.zeros(episodes, dtype=bool)
    totals = np.zeros(episodes)
    obs = runner.obs
    e, n = world.n_envs, world.n_agents
    while not finished.all():
        z, _ = runner.latents(obs)
        x = np.concatenate([z, obs], axis=-1).reshape(e * n, -1)
        actions, _, _, _ = act(params, x, None)
        _, obs, reward, done = world.step(actions.reshape(e, n, -1))
        totals += np.where(finished, 0.0, reward)
        finished |= done
    return float(totals.mean())


@dataclass(frozen=True)
class EvalSummary:
    per_seed: tuple[float, ...]
    mean: float
    p2_5: float
    p97_5: float


def summarize_seeds(values: Sequence[float]) -> EvalSummary:
    """Mean and central 95% interval (2.5th / 97.5th percentiles) across seeds."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ConfigurationError("no per-seed values to summarize")
    return EvalSummary(tuple(arr.tolist()), float(arr.mean()), float(np.percentile(arr, 2.5)),
                       float(np.percentile(arr, 97.5)))


def evaluate(params_per_seed: Sequence[PolicyParams], env_config: EnvConfig, task: TaskId | str,
             arm: ArmId | str, episodes: int, seeds: Sequence[int],
             autoencoder: SetAutoencoder | None = None, n_agents: int | None = None) -> EvalSummary:
    if len(params_per_seed) != len(seeds):
        raise ConfigurationError("need one parameter set per seed")
    means = [evaluate_policy(p, env_config, task, arm, episodes, s, autoencoder, n_agents=n_agents)
             for p, s in zip(params_per_seed, seeds)]
    return summarize_seeds(means)


def final_decile_mean(returns: Sequence[float]) -> float:
    arr = np.asarray(returns, dtype=np.float64)
    k = max(1, int(math.ceil(len(arr) / 10)))
    return float(np.nanmean(arr[-k:]))
