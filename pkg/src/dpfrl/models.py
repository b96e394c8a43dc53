"""All learnable networks and their parameter container.

One `Params` object holds every tensor of a model variant: observation
and action encoders, the gated stochastic cell of the filter, the
compatibility layer, MGF locations, actor/value heads, and the optional
generative decoder or merge recurrence used by ablations. Parameter
shapes are a pure function of the config, with a closed-form count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .config import TrainConfig
from .engine import (
    BatchNormState,
    RngStream,
    Tensor,
    add,
    batchnorm,
    broadcast_to,
    clamp,
    concat,
    exp,
    log,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softplus,
    square,
    sub,
    sum_,
    tanh,
)
from .errors import CheckpointError, ConfigError, ShapeError

if TYPE_CHECKING:
    from .filter import BeliefFeatures, ParticleBelief

ENC_WIDTH = 64       # observation encoder layer width
ACT_WIDTH = 64       # action encoding width
HEAD_WIDTH = 64      # hidden width of actor and value heads
ACTION_DIM = 2
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
DEC_SIGMA_FLOOR = 1e-3

CHECKPOINT_VERSION = "dpfrl-ckpt-1"

LOG_2PI = float(np.log(2.0 * np.pi))


def orthogonal(rng: np.random.Generator, shape: tuple, gain: float,
               dtype) -> np.ndarray:
    a = rng.standard_normal(shape)
    u, _, vt = np.linalg.svd(a, full_matrices=False)
    q = u if u.shape == shape else vt
    return (gain * q).astype(dtype)


class Params:
    """Named parameter tensors plus batch-norm running statistics."""

    def __init__(self, cfg: TrainConfig, rng: RngStream):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.float64 if cfg.dtype == "float64" else np.float32
        self._items: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._build(rng.generator())

    # -- construction -------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> None:
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self._items[name] = t

    def _affine(self, gen, name: str, d_in: int, d_out: int, gain: float = 1.0):
        self._param(f"{name}_w", orthogonal(gen, (d_in, d_out), gain, self.dtype))
        self._param(f"{name}_b", np.zeros(d_out))

    def _bn_layer(self, gen, name: str, width: int):
        self._param(f"{name}_gamma", np.ones(width))
        self._param(f"{name}_beta", np.zeros(width))
        self.bn[name] = BatchNormState(width, dtype=self.dtype)

    def _build(self, gen: np.random.Generator):
        cfg = self.cfg
        obs_dim = cfg.obs_dim
        H = cfg.H
        x_dim = ENC_WIDTH + ACT_WIDTH

        self._affine(gen, "enc1", obs_dim, ENC_WIDTH)
        self._bn_layer(gen, "enc1", ENC_WIDTH)
        self._affine(gen, "enc2", ENC_WIDTH, ENC_WIDTH)
        self._bn_layer(gen, "enc2", ENC_WIDTH)
        self._affine(gen, "act", ACTION_DIM, ACT_WIDTH)
        self._bn_layer(gen, "act", ACT_WIDTH)

        for gate in ("cell_wz", "cell_wr", "cell_wn"):
            self._param(gate, orthogonal(gen, (H + x_dim, H), 1.0, self.dtype))
            self._param(gate.replace("w", "b"), np.zeros(H))
        self._param("h0", np.zeros(H))

        is_pf = cfg.variant != "gru"
        if is_pf:
            self._param("cell_wv", orthogonal(gen, (H + x_dim, H), 1.0, self.dtype))
            self._param("cell_bv", np.zeros(H))
            if cfg.variant == "dpfrl-generative":
                self._affine(gen, "dec1", H, ENC_WIDTH)
                self._bn_layer(gen, "dec1", ENC_WIDTH)
                self._affine(gen, "dec2", ENC_WIDTH, ENC_WIDTH)
                self._bn_layer(gen, "dec2", ENC_WIDTH)
                self._affine(gen, "dec_out", ENC_WIDTH, 2 * obs_dim)
            else:
                self._affine(gen, "obs", H + ENC_WIDTH, 1)
            if cfg.variant == "dpfrl-grumerge":
                for gate in ("mrg_wz", "mrg_wr", "mrg_wn"):
                    self._param(gate, orthogonal(gen, (H + H + 1, H), 1.0, self.dtype))
                    self._param(gate.replace("w", "b"), np.zeros(H))

        m = self.feature_count()
        if m > 0:
            self._param("mgf_v", 0.01 * gen.standard_normal((m, H)))

        feat = self.policy_input_dim()
        self._affine(gen, "actor1", feat, HEAD_WIDTH)
        self._affine(gen, "actor2", HEAD_WIDTH, ACTION_DIM, gain=0.01)
        self._affine(gen, "value1", feat, HEAD_WIDTH)
        self._affine(gen, "value2", HEAD_WIDTH, 1)
        self._param("log_std", np.zeros(ACTION_DIM))

    def feature_count(self) -> int:
        """Number of MGF features the variant actually uses."""
        return self.cfg.m if self.cfg.variant in ("dpfrl", "dpfrl-generative") else 0

    def policy_input_dim(self) -> int:
        return self.cfg.H + self.feature_count()

    # -- access -------------------------------------------------------

    def get(self, name: str) -> Tensor:
        try:
            return self._items[name]
        except KeyError:
            raise ConfigError(
                f"parameter {name!r} is not built for variant {self.cfg.variant!r}"
            )

    def has(self, name: str) -> bool:
        return name in self._items

    def items(self) -> list[tuple[str, Tensor]]:
        return sorted(self._items.items())

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def count(self) -> int:
        return sum(t.size for t in self._items.values())

    def finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self._items.values())


def expected_param_count(cfg: TrainConfig) -> int:
    """Closed-form parameter count for a variant; must match `Params.count`."""
    obs_dim = cfg.obs_dim
    H = cfg.H
    x_dim = ENC_WIDTH + ACT_WIDTH
    n = 0
    # encoders (affine + batchnorm gamma/beta)
    n += (obs_dim + 1) * ENC_WIDTH + 2 * ENC_WIDTH
    n += (ENC_WIDTH + 1) * ENC_WIDTH + 2 * ENC_WIDTH
    n += (ACTION_DIM + 1) * ACT_WIDTH + 2 * ACT_WIDTH
    # gated cell (3 gates) + initial latent
    n += 3 * ((H + x_dim + 1) * H)
    n += H
    if cfg.variant != "gru":
        n += (H + x_dim + 1) * H                     # variance layer
        if cfg.variant == "dpfrl-generative":
            n += (H + 1) * ENC_WIDTH + 2 * ENC_WIDTH
            n += (ENC_WIDTH + 1) * ENC_WIDTH + 2 * ENC_WIDTH
            n += (ENC_WIDTH + 1) * 2 * obs_dim
        else:
            n += H + ENC_WIDTH + 1                   # compatibility layer
        if cfg.variant == "dpfrl-grumerge":
            n += 3 * ((2 * H + 1 + 1) * H)
    m = cfg.m if cfg.variant in ("dpfrl", "dpfrl-generative") else 0
    n += m * H
    feat = H + m
    n += (feat + 1) * HEAD_WIDTH + (HEAD_WIDTH + 1) * ACTION_DIM
    n += (feat + 1) * HEAD_WIDTH + (HEAD_WIDTH + 1) * 1
    n += ACTION_DIM                                  # log_std
    return n


# ---------------------------------------------------------------------------
# network ops


def _enc_layer(params: Params, name: str, x: Tensor, training: bool) -> Tensor:
    y = add(matmul(x, params.get(f"{name}_w")), params.get(f"{name}_b"))
    y = batchnorm(y, params.get(f"{name}_gamma"), params.get(f"{name}_beta"),
                  params.bn[name], training)
    return relu(y)


def encode_observation(params: Params, obs: Tensor, training: bool) -> Tensor:
    """Two affine+batchnorm+ReLU layers; (E, 2+l) -> (E, 64)."""
    if obs.ndim != 2 or obs.shape[1] != params.cfg.obs_dim:
        raise ShapeError(
            f"encode_observation: expected (*, {params.cfg.obs_dim}), got {obs.shape}"
        )
    h = _enc_layer(params, "enc1", obs, training)
    return _enc_layer(params, "enc2", h, training)


def encode_action(params: Params, action: Tensor, training: bool) -> Tensor:
    """Single affine+batchnorm+ReLU layer; (E, 2) -> (E, 64)."""
    if action.ndim != 2 or action.shape[1] != ACTION_DIM:
        raise ShapeError(f"encode_action: expected (*, {ACTION_DIM}), got {action.shape}")
    return _enc_layer(params, "act", action, training)


@dataclass
class PolicyOutput:
    action_mean: Tensor   # (E, 2)
    log_std: Tensor       # (2,), clamped
    value: Tensor         # (E,)


def policy_heads(params: Params, features: "BeliefFeatures") -> PolicyOutput:
    """Actor and value heads over the belief summary [mean; MGF]."""
    x = features.joint()
    a = relu(add(matmul(x, params.get("actor1_w")), params.get("actor1_b")))
    action_mean = add(matmul(a, params.get("actor2_w")), params.get("actor2_b"))
    v = relu(add(matmul(x, params.get("value1_w")), params.get("value1_b")))
    value = reshape(add(matmul(v, params.get("value2_w")), params.get("value2_b")),
                    (x.shape[0],))
    log_std = clamp(params.get("log_std"), LOG_STD_MIN, LOG_STD_MAX)
    return PolicyOutput(action_mean, log_std, value)


def gaussian_log_prob(out: PolicyOutput, actions: Tensor) -> Tensor:
    """Log-density of `actions` under the diagonal Gaussian policy: (E,)."""
    diff = sub(actions, out.action_mean)
    inv_var = exp(scale(out.log_std, -2.0))
    quad = sum_(mul(square(diff), inv_var), axis=1)
    return sub(scale(quad, -0.5),
               add(sum_(out.log_std), Tensor(np.asarray(0.5 * ACTION_DIM * LOG_2PI))))


def gaussian_entropy(out: PolicyOutput) -> Tensor:
    """Closed-form entropy of the diagonal Gaussian policy (scalar)."""
    c = 0.5 * ACTION_DIM * (LOG_2PI + 1.0)
    return add(sum_(out.log_std), Tensor(np.asarray(c)))


def generative_logit(params: Params, particles: Tensor, raw_obs: Tensor,
                     training: bool) -> Tensor:
    """Ablation: per-particle log-likelihood of the raw observation under a
    decoded diagonal Gaussian; replaces the compatibility logits."""
    if not params.has("dec1_w"):
        raise ConfigError("generative decoder is not enabled for this variant")
    E, K, H = particles.shape
    D = params.cfg.obs_dim
    h2 = reshape(particles, (E * K, H))
    d = _enc_layer(params, "dec1", h2, training)
    d = _enc_layer(params, "dec2", d, training)
    out = add(matmul(d, params.get("dec_out_w")), params.get("dec_out_b"))
    mu = slice_(out, (slice(None), slice(0, D)))
    sig = add(softplus(slice_(out, (slice(None), slice(D, 2 * D)))),
              Tensor(np.asarray(DEC_SIGMA_FLOOR, dtype=out.dtype)))
    obs_b = reshape(broadcast_to(reshape(raw_obs, (E, 1, D)), (E, K, D)), (E * K, D))
    log_sig = log(sig)
    quad = mul(square(sub(obs_b, mu)), exp(scale(log_sig, -2.0)))
    ll = sub(scale(sum_(quad, axis=1), -0.5),
             add(sum_(log_sig, axis=1), Tensor(np.asarray(0.5 * D * LOG_2PI))))
    return reshape(ll, (E, K))


def gate_preact(params: Params, name: str, h2: Tensor, x: Tensor,
                E: int, K: int) -> Tensor:
    """Pre-activation of one gated layer, W [h, x] + b computed as the
    per-particle part h @ W_h plus the per-environment part x @ W_x.

    `h2` is (E*K, H_in) and `x` is (E, X), shared by all K particles of
    an environment; the split avoids repeating the x half K times.
    Returns (E, K, H_out).
    """
    W = params.get(name)
    hdim = h2.shape[1]
    w_h = slice_(W, (slice(0, hdim),))
    w_x = slice_(W, (slice(hdim, None),))
    H_out = W.shape[1]
    hw = reshape(matmul(h2, w_h), (E, K, H_out))
    xw = reshape(matmul(x, w_x), (E, 1, H_out))
    bias = params.get(name.replace("_w", "_b"))
    return add(add(hw, xw), bias)


def gated_update(params: Params, prefix: str, particles: Tensor, x: Tensor,
                 candidate_noise=None) -> Tensor:
    """Shared gated-memory update over (E, K, H) hypotheses with a common
    per-environment input x: h' = (1 - z) tanh(n) + z h.

    `candidate_noise` (if given) maps the candidate pre-activation n to
    its stochastic version; the baseline and the filter run this exact
    code path so their outputs agree bit-for-bit under shared weights.
    """
    E, K, H = particles.shape
    h2 = reshape(particles, (E * K, H))
    z = sigmoid(gate_preact(params, f"{prefix}_wz", h2, x, E, K))
    r = sigmoid(gate_preact(params, f"{prefix}_wr", h2, x, E, K))
    rh2 = reshape(mul(r, particles), (E * K, H))
    n = gate_preact(params, f"{prefix}_wn", rh2, x, E, K)
    if candidate_noise is not None:
        n = candidate_noise(n, h2)
    one = Tensor(np.asarray(1.0, dtype=particles.dtype))
    return add(mul(sub(one, z), tanh(n)), mul(z, particles))


def gru_baseline_step(params: Params, hidden: Tensor, obs_enc: Tensor,
                      act_enc: Tensor) -> Tensor:
    """Deterministic gated recurrence for the memory-only baseline."""
    x = concat([obs_enc, act_enc], axis=1)
    E, H = hidden.shape
    h3 = reshape(hidden, (E, 1, H))
    return reshape(gated_update(params, "cell", h3, x), (E, H))


def gru_merge(params: Params, belief: "ParticleBelief") -> Tensor:
    """Ablation: summarize the belief by running a recurrence over the
    (particle, weight) pairs in index order. Order-dependent by design."""
    if not params.has("mrg_wz"):
        raise ConfigError("merge recurrence is not enabled for this variant")
    E, K, H = belief.particles.shape
    w = exp(belief.log_weights)
    hidden = Tensor(np.zeros((E, H), dtype=params.dtype))
    for i in range(K):
        h_i = slice_(belief.particles, (slice(None), i))
        w_i = slice_(w, (slice(None), slice(i, i + 1)))
        x = concat([h_i, w_i], axis=1)
        h3 = reshape(hidden, (E, 1, H))
        hidden = reshape(gated_update(params, "mrg", h3, x), (E, H))
    return hidden


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, params: Params) -> None:
    """Single .npz with a version tag, the config echo, every named
    parameter, and the batch-norm running statistics."""
    arrays = {"p/" + name: t.data for name, t in params.items()}
    for name, st in params.bn.items():
        arrays[f"bn/{name}/mean"] = st.running_mean
        arrays[f"bn/{name}/var"] = st.running_var
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": {k: v for k, v in params.cfg.__dict__.items()},
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_config(path: str) -> TrainConfig:
    """Recover the TrainConfig echoed into a checkpoint."""
    try:
        with np.load(path) as data:
            if "__meta__" not in data.files:
                raise CheckpointError(f"checkpoint {path} has no metadata block")
            meta = json.loads(bytes(data["__meta__"]).decode())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    return TrainConfig(**meta["config"]).validate()


def load_checkpoint(path: str, cfg: TrainConfig, rng: RngStream | None = None) -> Params:
    """Rebuild a `Params` for `cfg` and fill it from the file, validating
    the version tag and every array shape."""
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no metadata block")
    meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION!r}"
        )
    params = Params(cfg, rng if rng is not None else RngStream(0, 0))
    for name, t in params.items():
        key = "p/" + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} != model {t.shape}"
            )
        t.data = np.ascontiguousarray(arr, dtype=params.dtype)
    for name, st in params.bn.items():
        for field, target in (("mean", "running_mean"), ("var", "running_var")):
            key = f"bn/{name}/{field}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing batchnorm state {key!r}")
            arr = arrays[key]
            if arr.shape != getattr(st, target).shape:
                raise CheckpointError(
                    f"batchnorm {key!r}: shape {arr.shape} != {getattr(st, target).shape}"
                )
            setattr(st, target, np.ascontiguousarray(arr, dtype=params.dtype))
    return params
