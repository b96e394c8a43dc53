"""Advantage actor-critic training over the belief-conditioned policy.

The rollout graph spans n steps of E parallel environments on one tape;
the belief (or baseline memory) is carried across updates by value only,
so backpropagation truncates at rollout boundaries. The loss is the
standard three-term objective: policy gradient with detached advantages,
value regression, and an entropy bonus.
"""
from __future__ import annotations

import json
import os
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .config import TrainConfig, echo_config
from .engine import (
    BELIEF_INIT,
    FILTER_NOISE,
    PARAM_INIT,
    POLICY,
    RESAMPLE,
    RmsProp,
    RngStream,
    Tape,
    Tensor,
    broadcast_to,
    clip_global_norm,
    concat,
    constant,
    global_norm,
    mean_,
    mul,
    reshape,
    scale,
    square,
    sub,
)
from .errors import ConfigError, TrainingError
from .filter import (
    BeliefFeatures,
    ParticleBelief,
    dpfrl_step,
    dump_particles,
    init_belief,
    masked_reset,
    particle_csv_header,
)
from .hike import HikeConfig, HikeVectorEnv, RewardMap
from .models import (
    Params,
    encode_action,
    encode_observation,
    gaussian_entropy,
    gaussian_log_prob,
    gru_baseline_step,
    load_checkpoint,
    policy_heads,
    read_checkpoint_config,
    save_checkpoint,
)

METRIC_FIELDS = (
    "step", "episodes", "mean_return", "loss_a", "loss_v", "loss_h",
    "grad_norm", "wall_time",
)

RETURN_WINDOW = 100  # episodes averaged into the mean_return metric


@dataclass
class RolloutBatch:
    """n-step experience from E environments plus the tape-connected
    policy quantities needed by the loss."""

    observations: np.ndarray        # (E, n, 2+l)
    actions: np.ndarray             # (E, n, 2) pre-squash policy samples
    rewards: np.ndarray             # (E, n)
    dones: np.ndarray               # (E, n) bool
    values: Tensor                  # (E, n), on tape
    log_probs: Tensor               # (E, n), on tape
    entropy: Tensor                 # scalar, on tape
    bootstrap: np.ndarray           # (E,)
    completed: list                 # (env, episode return) finished this rollout


class Model:
    """Variant dispatch: belief-filter models vs the memory baseline."""

    def __init__(self, params: Params, cfg: TrainConfig, seed: int):
        self.params = params
        self.cfg = cfg
        self.noise_rng = RngStream(seed, FILTER_NOISE)
        self.resample_rng = RngStream(seed, RESAMPLE)
        self.belief_rng = RngStream(seed, BELIEF_INIT)
        self.is_pf = cfg.variant != "gru"

    def reset_streams(self) -> None:
        """Rewind the model's noise streams to their start (grad checks)."""
        self.noise_rng.step = 0
        self.resample_rng.step = 0
        self.belief_rng.step = 0

    def initial_state(self, batch: int) -> Union[ParticleBelief, Tensor]:
        if self.is_pf:
            return init_belief(self.params, self.cfg.K, batch, self.belief_rng)
        h0 = self.params.get("h0")
        return broadcast_to(reshape(h0, (1, self.cfg.H)), (batch, self.cfg.H))

    def reset_state(self, state, done: np.ndarray):
        if not done.any():
            return state
        if self.is_pf:
            fresh = init_belief(self.params, self.cfg.K, state.batch, self.belief_rng)
            return masked_reset(state, fresh, done)
        mask = constant(done.astype(self.params.dtype)[:, None])
        fresh = self.initial_state(state.shape[0])
        return mul(state, 1.0 - mask) + mul(fresh, mask)

    def detach_state(self, state):
        if self.is_pf:
            return ParticleBelief(
                Tensor(state.particles.data), Tensor(state.log_weights.data)
            )
        return Tensor(state.data)

    def step(self, state, obs: np.ndarray, prev_action: np.ndarray,
             training: bool, context: str = "step"):
        if self.is_pf:
            return dpfrl_step(
                self.params, state, obs, prev_action,
                self.noise_rng, self.resample_rng,
                alpha=self.cfg.alpha, sigma_min=self.cfg.sigma_min,
                deterministic=self.cfg.deterministic_filter,
                training=training, variant=self.cfg.variant, context=context,
            )
        dtype = self.params.dtype
        obs_enc = encode_observation(self.params, constant(obs.astype(dtype)), training)
        act_enc = encode_action(self.params, constant(prev_action.astype(dtype)), training)
        hidden = gru_baseline_step(self.params, state, obs_enc, act_enc)
        return hidden, BeliefFeatures(hidden, None)


def sample_actions(po, rng: RngStream) -> np.ndarray:
    """Draw pre-squash actions from the policy Gaussian (not on the tape;
    the policy gradient uses the likelihood-ratio estimator)."""
    eps = rng.normal(po.action_mean.shape, dtype=po.action_mean.dtype)
    return po.action_mean.data + np.exp(po.log_std.data) * eps


def squash(actions: np.ndarray, max_step: float) -> np.ndarray:
    return np.tanh(actions) * max_step


def collect_rollout(model: Model, state, obs: np.ndarray,
                    prev_action: np.ndarray, envs: HikeVectorEnv,
                    n_steps: int, policy_rng: RngStream, *,
                    training: bool = True, update_idx: int = 0,
                    particle_fh=None):
    """Run n environment steps, returning the batch plus the carried
    (state, obs, prev_action) for the next rollout."""
    E = envs.n
    cfg = model.cfg
    obs_hist = np.empty((E, n_steps, envs.cfg.obs_dim))
    act_hist = np.empty((E, n_steps, 2))
    rewards = np.empty((E, n_steps))
    dones = np.zeros((E, n_steps), dtype=bool)
    values, log_probs = [], []
    completed: list = []
    po = None

    for t in range(n_steps):
        context = f"update {update_idx}, rollout step {t}"
        state, feats = model.step(state, obs, prev_action, training, context)
        if particle_fh is not None and model.is_pf:
            dump_particles(particle_fh, state, update_idx * n_steps + t)
        po = policy_heads(model.params, feats)
        actions = sample_actions(po, policy_rng)
        lp = gaussian_log_prob(po, constant(actions))
        env_actions = squash(actions, cfg.max_step)

        obs_hist[:, t] = obs
        act_hist[:, t] = actions
        next_obs, rew, done, finished = envs.step(env_actions)
        rewards[:, t] = rew
        dones[:, t] = done
        completed.extend(finished)

        values.append(reshape(po.value, (E, 1)))
        log_probs.append(reshape(lp, (E, 1)))

        prev_action = env_actions.copy()
        prev_action[done] = 0.0
        state = model.reset_state(state, done)
        obs = next_obs

    with Tape.paused():
        _, feats_b = model.step(state, obs, prev_action, training,
                                f"update {update_idx}, bootstrap")
        bootstrap = policy_heads(model.params, feats_b).value.data.copy()

    batch = RolloutBatch(
        observations=obs_hist,
        actions=act_hist,
        rewards=rewards,
        dones=dones,
        values=concat(values, axis=1),
        log_probs=concat(log_probs, axis=1),
        entropy=gaussian_entropy(po),
        bootstrap=bootstrap,
        completed=completed,
    )
    return batch, state, obs, prev_action


def compute_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float,
                    bootstrap: np.ndarray) -> np.ndarray:
    """n-step discounted returns R_t = r_t + gamma * (1 - done_t) * R_{t+1},
    seeded with the bootstrap value."""
    E, n = rewards.shape
    out = np.empty((E, n))
    carry = np.asarray(bootstrap, dtype=np.float64)
    for t in range(n - 1, -1, -1):
        carry = rewards[:, t] + gamma * (~dones[:, t]) * carry
        out[:, t] = carry
    return out


def a2c_loss(batch: RolloutBatch, returns: np.ndarray, lambda_v: float,
             lambda_h: float):
    """Policy + value + entropy objective; returns (loss, parts)."""
    dtype = batch.values.dtype
    adv = (returns - batch.values.data).astype(dtype)
    ret = constant(returns.astype(dtype))
    loss_a = scale(mean_(mul(batch.log_probs, constant(adv))), -1.0)
    loss_v = mean_(square(sub(ret, batch.values)))
    loss_h = scale(batch.entropy, -1.0)
    total = loss_a + scale(loss_v, lambda_v) + scale(loss_h, lambda_h)
    parts = {
        "loss_a": loss_a.item(),
        "loss_v": loss_v.item(),
        "loss_h": loss_h.item(),
    }
    return total, parts


def pipeline_grad_check(cfg: TrainConfig, seed: int = 1, n_steps: int = 2,
                        step: float = 1e-6) -> float:
    """Finite-difference check of the whole model: encoders, stochastic
    transition, reweighting, soft-resampling, belief features, policy
    heads, and the three-term loss, w.r.t. every parameter.

    One real rollout fixes the observation/action/return data; the
    checked function then rebuilds the filter pass over that fixed data
    with freshly seeded noise streams, exactly reproducing what backward
    differentiates (advantages and returns are constants of the loss).
    Returns the max relative gradient error.
    """
    from .engine import grad_check

    cfg.validate()
    envs = build_envs(cfg)
    params = Params(cfg, RngStream(cfg.seed, PARAM_INIT))
    # nudge every parameter off its init symmetry point: zero biases put
    # ReLU inputs exactly on the kink, where one-sided subgradients and
    # central differences legitimately disagree
    nudge = RngStream(seed, 90)
    for t in params.all_tensors():
        t.data = t.data + 0.01 * nudge.normal(t.shape, dtype=t.dtype)
    model = Model(params, cfg, cfg.seed)
    policy_rng = RngStream(cfg.seed, POLICY)
    obs0 = envs.reset()
    prev0 = np.zeros((cfg.envs, 2))
    state0 = model.initial_state(cfg.envs)
    # warm-start so the captured window is a generic mid-stream segment
    _, state0, obs0, prev0 = collect_rollout(model, state0, obs0, prev0, envs,
                                             3, policy_rng)
    state0 = model.detach_state(state0)
    batch, _, _, _ = collect_rollout(model, state0, obs0, prev0, envs,
                                     n_steps, policy_rng)
    returns = compute_returns(batch.rewards, batch.dones, cfg.gamma,
                              batch.bootstrap)
    advantages = returns - batch.values.data
    mdl = model

    def run_loss(*_params) -> Tensor:
        mdl.reset_streams()
        state = mdl.initial_state(cfg.envs)
        values, log_probs = [], []
        prev_action = prev0.copy()
        po = None
        for t in range(n_steps):
            state, feats = mdl.step(state, batch.observations[:, t], prev_action,
                                    training=True)
            po = policy_heads(params, feats)
            log_probs.append(reshape(
                gaussian_log_prob(po, constant(batch.actions[:, t])), (cfg.envs, 1)))
            values.append(reshape(po.value, (cfg.envs, 1)))
            prev_action = squash(batch.actions[:, t], cfg.max_step)
            prev_action[batch.dones[:, t]] = 0.0
            state = mdl.reset_state(state, batch.dones[:, t])
        dtype = params.dtype
        lp = concat(log_probs, axis=1)
        vals = concat(values, axis=1)
        loss_a = scale(mean_(mul(lp, constant(advantages.astype(dtype)))), -1.0)
        loss_v = mean_(square(sub(constant(returns.astype(dtype)), vals)))
        loss_h = scale(gaussian_entropy(po), -1.0)
        return loss_a + scale(loss_v, cfg.lambda_v) + scale(loss_h, cfg.lambda_h)

    return grad_check(run_loss, params.all_tensors(), step=step)


def build_envs(cfg: TrainConfig, seed: Optional[int] = None) -> HikeVectorEnv:
    reward_map = (RewardMap.from_grid(cfg.reward_map) if cfg.reward_map
                  else RewardMap(goal=(cfg.goal_x, cfg.goal_y)))
    hike_cfg = HikeConfig(
        noise_len=cfg.noise_len,
        start=(cfg.start_x, cfg.start_y),
        deterministic=cfg.deterministic_env,
        reward_map=reward_map,
    )
    return HikeVectorEnv(cfg.envs, hike_cfg, cfg.seed if seed is None else seed)


def train(cfg: TrainConfig, run_dir: str, quiet: bool = True) -> dict:
    """Full training loop; writes config echo, metrics.jsonl, and
    checkpoints into `run_dir` and returns a summary."""
    cfg.validate()
    os.makedirs(run_dir, exist_ok=True)
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    echo_config(cfg, os.path.join(run_dir, "config.txt"))

    envs = build_envs(cfg)
    params = Params(cfg, RngStream(cfg.seed, PARAM_INIT))
    model = Model(params, cfg, cfg.seed)
    policy_rng = RngStream(cfg.seed, POLICY)
    opt = RmsProp(params.all_tensors(), lr=cfg.lr, alpha=cfg.rms_alpha,
                  eps=cfg.rms_eps)

    steps_per_update = cfg.envs * cfg.n_steps
    n_updates = max(1, cfg.total_env_steps // steps_per_update)

    obs = envs.reset()
    prev_action = np.zeros((cfg.envs, 2))
    state = model.initial_state(cfg.envs)

    recent_returns: deque = deque(maxlen=RETURN_WINDOW)
    episodes = 0
    env_steps = 0
    start = time.perf_counter()

    particle_fh = None
    if cfg.dump_particles and cfg.variant != "gru":
        particle_fh = open(os.path.join(run_dir, "particles.csv"), "w")
        particle_fh.write(particle_csv_header(cfg.H) + "\n")

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    try:
        with open(metrics_path, "w") as metrics_fh:
            for update in range(1, n_updates + 1):
                with Tape() as tape:
                    batch, state, obs, prev_action = collect_rollout(
                        model, state, obs, prev_action, envs, cfg.n_steps,
                        policy_rng, update_idx=update, particle_fh=particle_fh,
                    )
                    returns = compute_returns(batch.rewards, batch.dones,
                                              cfg.gamma, batch.bootstrap)
                    loss, parts = a2c_loss(batch, returns, cfg.lambda_v, cfg.lambda_h)
                    if not np.isfinite(loss.item()):
                        dump = os.path.join(ckpt_dir, "diagnostic.npz")
                        save_checkpoint(dump, params)
                        raise TrainingError(
                            f"non-finite loss at update {update}; state dumped to {dump}"
                        )
                    tape.backward(loss)

                grads = [p.grad for p in params.all_tensors() if p.grad is not None]
                grad_norm = global_norm(grads)
                clip_global_norm(grads, cfg.clip)
                opt.step()
                opt.zero_grad()
                if not params.finite():
                    dump = os.path.join(ckpt_dir, "diagnostic.npz")
                    save_checkpoint(dump, params)
                    raise TrainingError(
                        f"non-finite parameters at update {update}; dumped to {dump}"
                    )
                state = model.detach_state(state)

                env_steps += steps_per_update
                episodes += len(batch.completed)
                for _, ret in batch.completed:
                    recent_returns.append(ret)
                mean_return = (float(np.mean(recent_returns))
                               if recent_returns else None)
                record = {
                    "step": env_steps,
                    "episodes": episodes,
                    "mean_return": mean_return,
                    "loss_a": parts["loss_a"],
                    "loss_v": parts["loss_v"],
                    "loss_h": parts["loss_h"],
                    "grad_norm": grad_norm,
                    "wall_time": time.perf_counter() - start,
                }
                metrics_fh.write(json.dumps(record) + "\n")
                if update % 200 == 0:
                    metrics_fh.flush()
                if not quiet and update % 100 == 0:
                    print(f"[{run_dir}] update {update}/{n_updates} "
                          f"return={mean_return}")
                if update % cfg.checkpoint_interval == 0:
                    save_checkpoint(os.path.join(ckpt_dir, f"ckpt_{update}.npz"),
                                    params)
    finally:
        if particle_fh is not None:
            particle_fh.close()

    final_ckpt = os.path.join(ckpt_dir, "final.npz")
    save_checkpoint(final_ckpt, params)
    return {
        "updates": n_updates,
        "env_steps": env_steps,
        "episodes": episodes,
        "final_mean_return": (float(np.mean(recent_returns))
                              if recent_returns else None),
        "checkpoint": final_ckpt,
        "metrics": metrics_path,
    }


def evaluate(checkpoint: str, episodes: int, noise_len: Optional[int] = None,
             seed: int = 123) -> dict:
    """Greedy-policy evaluation of a checkpoint: mean +/- std of the
    accumulated reward over the requested number of episodes."""
    if episodes < 1:
        raise ConfigError("evaluate: requested an empty report (episodes < 1)")
    cfg = read_checkpoint_config(checkpoint)
    if noise_len is not None:
        cfg.noise_len = noise_len
    params = load_checkpoint(checkpoint, cfg)
    model = Model(params, cfg, seed)
    envs = build_envs(cfg, seed=seed)

    returns: list[float] = []
    obs = envs.reset()
    prev_action = np.zeros((cfg.envs, 2))
    state = model.initial_state(cfg.envs)
    while len(returns) < episodes:
        state, feats = model.step(state, obs, prev_action, training=False)
        po = policy_heads(params, feats)
        env_actions = squash(po.action_mean.data, cfg.max_step)
        obs, _, done, finished = envs.step(env_actions)
        returns.extend(ret for _, ret in finished)
        prev_action = env_actions.copy()
        prev_action[done] = 0.0
        state = model.reset_state(state, done)
    returns = returns[:episodes]
    return {
        "episodes": episodes,
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "returns": returns,
    }
