"""Particle belief tracking: the differentiable filter update.

A belief is a set of K weighted latent particles per environment,
stored batched as an (E, K, H) particle tensor and an (E, K) tensor of
normalized log-weights. One full update step runs, in order:

    encode observation -> observation-conditioned stochastic transition
    -> discriminative reweighting -> soft-resampling -> belief features

and everything except the resampling index draw is differentiable, so
the policy gradient reaches the filter parameters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from .engine import (
    RngStream,
    Tensor,
    add,
    broadcast_to,
    clamp,
    concat,
    constant,
    exp,
    gather_rows,
    gaussian_sample,
    log,
    logsumexp,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    sub,
    sum_,
    tanh,
    transpose2d,
)
from .errors import ConfigError, FilterError

if TYPE_CHECKING:
    from .models import Params

MGF_EXP_CLAMP = 30.0  # exponent cap before exponentiation


@dataclass
class ParticleBelief:
    """K weighted latent particles per environment, weights normalized."""

    particles: Tensor   # (E, K, H)
    log_weights: Tensor  # (E, K)

    @property
    def batch(self) -> int:
        return self.particles.shape[0]

    @property
    def K(self) -> int:
        return self.particles.shape[1]

    @property
    def H(self) -> int:
        return self.particles.shape[2]


@dataclass
class BeliefFeatures:
    """Policy input: mean particle plus optional MGF feature values."""

    mean: Tensor            # (E, H)
    mgf: Optional[Tensor]   # (E, m) or None when the variant drops them

    def joint(self) -> Tensor:
        if self.mgf is None:
            return self.mean
        return concat([self.mean, self.mgf], axis=1)


def log_normalize(log_w: Tensor) -> Tensor:
    return sub(log_w, logsumexp(log_w, axis=1, keepdims=True))


def normalization_defect(belief: ParticleBelief) -> float:
    """Max |logsumexp(log_weights)| across environments (0 when normalized)."""
    lse = np.array(
        [float(x) for x in _np_logsumexp(belief.log_weights.data)],
    )
    return float(np.max(np.abs(lse)))


def _np_logsumexp(lw: np.ndarray) -> np.ndarray:
    m = lw.max(axis=1, keepdims=True)
    return (np.log(np.exp(lw - m).sum(axis=1, keepdims=True)) + m)[:, 0]


def _check_finite(t: Tensor, what: str, context: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FilterError(f"non-finite {what} at {context}")
    return t


def init_belief(params: "Params", K: int, batch: int, rng: RngStream,
                noise_std: float = 0.1) -> ParticleBelief:
    """Fresh belief: learned initial latent broadcast to K particles plus
    Gaussian jitter, uniform weights."""
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    h0 = params.get("h0")
    H = h0.shape[0]
    dtype = h0.dtype
    eps = constant(noise_std * rng.normal((batch, K, H), dtype=dtype))
    particles = add(reshape(h0, (1, 1, H)), eps)
    log_w = constant(np.full((batch, K), -np.log(K), dtype=dtype))
    return ParticleBelief(particles, log_w)


def masked_reset(belief: ParticleBelief, fresh: ParticleBelief,
                 done: np.ndarray) -> ParticleBelief:
    """Replace the belief of environments whose episode just ended.

    `done` is an (E,) boolean mask. The blend is arithmetic so both the
    carried and the fresh side stay on the tape.
    """
    if not done.any():
        return belief
    dtype = belief.particles.dtype
    m3 = constant(done.astype(dtype)[:, None, None])
    m2 = constant(done.astype(dtype)[:, None])
    particles = add(mul(belief.particles, 1.0 - m3), mul(fresh.particles, m3))
    log_w = add(mul(belief.log_weights, 1.0 - m2), mul(fresh.log_weights, m2))
    return ParticleBelief(particles, log_w)


def transition_update(params: "Params", belief: ParticleBelief, obs_enc: Tensor,
                      act_enc: Tensor, rng: RngStream, sigma_min: float = 1e-3,
                      deterministic: bool = False,
                      context: str = "transition") -> ParticleBelief:
    """Stochastic gated update of every particle, conditioned on the
    current observation/action encodings. Weights are untouched.

    The candidate memory gets additive Gaussian noise with a learned,
    softplus-positive variance floored at `sigma_min`; `deterministic`
    suppresses the noise entirely (test hook, and the GRU-equivalence
    mode).
    """
    from .models import gate_preact, gated_update

    E, K, H = belief.particles.shape
    x = concat([obs_enc, act_enc], axis=1)                    # (E, X)

    if deterministic:
        noise = None
    else:
        def noise(n_mean, h2):
            var_raw = gate_preact(params, "cell_wv", h2, x, E, K)
            var = add(softplus(var_raw),
                      constant(np.asarray(sigma_min, dtype=n_mean.dtype)))
            return gaussian_sample(n_mean, log(var), rng)

    particles = gated_update(params, "cell", belief.particles, x,
                             candidate_noise=noise)
    _check_finite(particles, "particles", context)
    return ParticleBelief(particles, belief.log_weights)


def reweight_logits(belief: ParticleBelief, logits: Tensor,
                    context: str = "reweight") -> ParticleBelief:
    """Multiply weights by per-particle compatibility logits, in log space,
    then renormalize exactly."""
    _check_finite(logits, "compatibility logits", context)
    log_w = log_normalize(add(belief.log_weights, logits))
    return ParticleBelief(belief.particles, log_w)


def reweight(params: "Params", belief: ParticleBelief, obs_enc: Tensor,
             context: str = "reweight") -> ParticleBelief:
    """Discriminative weight update: a single affine layer scores each
    (particle, observation-encoding) pair."""
    from .models import gate_preact

    E, K, H = belief.particles.shape
    h2 = reshape(belief.particles, (E * K, H))
    logits = reshape(gate_preact(params, "obs_w", h2, obs_enc, E, K), (E, K))
    return reweight_logits(belief, logits, context)


def soft_resample(belief: ParticleBelief, alpha: float, rng: RngStream,
                  return_indices: bool = False):
    """Resample K particle indices i.i.d. from the softened proposal

        q(i) = alpha * w_i + (1 - alpha) / K

    and correct the weights by the importance ratio w_i / q(i), then
    renormalize. The index draw is not differentiable; gradients flow
    through the copied particle values and the weight ratio.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"soft-resampling alpha must be in [0, 1], got {alpha}")
    E, K, _ = belief.particles.shape
    w = exp(belief.log_weights)                               # (E, K)
    q = add(scale(w, alpha),
            constant(np.asarray((1.0 - alpha) / K, dtype=w.dtype)))

    cdf = np.cumsum(q.data, axis=1)
    u = rng.uniform((E, K))
    idx = np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), K - 1)

    log_q = log(q)
    particles = gather_rows(belief.particles, idx)
    lw_src = gather_rows(belief.log_weights, idx)
    lq_src = gather_rows(log_q, idx)
    log_w = log_normalize(sub(lw_src, lq_src))
    out = ParticleBelief(particles, log_w)
    if return_indices:
        return out, idx
    return out


def belief_mean(belief: ParticleBelief) -> Tensor:
    """Weight-averaged particle, the belief's first moment: (E, H)."""
    E, K, _ = belief.particles.shape
    w3 = reshape(exp(belief.log_weights), (E, K, 1))
    return sum_(mul(w3, belief.particles), axis=1)


def mgf_features(params: "Params", belief: ParticleBelief) -> BeliefFeatures:
    """Mean particle plus the belief's moment-generating function evaluated
    at the learned locations.

    Each feature is exp(logsumexp_i(log w_i + <v_j, h_i>)); the exponent
    is capped so single-precision training cannot overflow.
    """
    mean = belief_mean(belief)
    v = params.get("mgf_v")                                   # (m, H)
    m = v.shape[0]
    if m == 0:
        return BeliefFeatures(mean, None)
    E, K, H = belief.particles.shape
    dots = reshape(matmul(reshape(belief.particles, (E * K, H)), transpose2d(v)),
                   (E, K, m))
    arg = add(dots, reshape(belief.log_weights, (E, K, 1)))
    mgf = exp(clamp(logsumexp(arg, axis=1), hi=MGF_EXP_CLAMP))
    return BeliefFeatures(mean, mgf)


def dpfrl_step(params: "Params", belief: ParticleBelief, raw_obs: np.ndarray,
               prev_action: np.ndarray, noise_rng: RngStream,
               resample_rng: RngStream, *, alpha: float,
               sigma_min: float = 1e-3, deterministic: bool = False,
               training: bool = True, variant: str = "dpfrl",
               context: str = "step"):
    """One full belief update from a raw observation; returns the updated
    belief and the policy features.

    `variant` selects the reweighting source (discriminative layer or
    generative decoder) and the feature summary (mean+MGF, mean only, or
    a learned recurrent merge).
    """
    from .models import encode_action, encode_observation, generative_logit, gru_merge

    dtype = params.dtype
    obs_t = constant(np.asarray(raw_obs, dtype=dtype))
    act_t = constant(np.asarray(prev_action, dtype=dtype))
    obs_enc = encode_observation(params, obs_t, training=training)
    act_enc = encode_action(params, act_t, training=training)

    belief = transition_update(params, belief, obs_enc, act_enc, noise_rng,
                               sigma_min=sigma_min, deterministic=deterministic,
                               context=context)
    if variant == "dpfrl-generative":
        logits = generative_logit(params, belief.particles, obs_t, training=training)
        belief = reweight_logits(belief, logits, context=context)
    else:
        belief = reweight(params, belief, obs_enc, context=context)
    belief = soft_resample(belief, alpha, resample_rng)

    if variant == "dpfrl-grumerge":
        features = BeliefFeatures(gru_merge(params, belief), None)
    elif variant == "dpfrl-mean":
        features = BeliefFeatures(belief_mean(belief), None)
    else:
        features = mgf_features(params, belief)
    return belief, features


def dump_particles(fh, belief: ParticleBelief, step: int) -> None:
    """Append one CSV row per (env, particle) with the current weights
    and latent values. Header is the caller's job."""
    w = np.exp(belief.log_weights.data)
    h = belief.particles.data
    E, K, H = h.shape
    for e in range(E):
        for i in range(K):
            vals = ",".join(repr(float(x)) for x in h[e, i])
            fh.write(f"{e},{step},{i},{w[e, i]!r},{vals}\n")


def particle_csv_header(H: int) -> str:
    return "env,step,particle,weight," + ",".join(f"h_{d}" for d in range(H))
