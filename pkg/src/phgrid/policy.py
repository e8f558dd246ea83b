"""Graph capsule policy network with a Bernoulli action head and a value head.

Data flow for one observation (batch dimension ``B`` is optional)::

    V (N,3) --embed--> F0 (N,h0) --capsule layers--> (N, h_L*p)
      --node projection--> F_nodes (N,h) --W_g1, W_g2, column mean--> F_graph (h,)
    [E_supp, V_viol, b_e...] --feedforward--> F_context (h,)
    F_graph + F_context --MLP--> --linear--> logits (n_actions,)
                        --MLP--> --linear--> value ()
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concat, stable_sigmoid, where

# sigmoid(MASK_LOGIT) underflows to exactly 0.0 in float64
MASK_LOGIT = -1e9
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class GcapcnConfig:
    layers: int = 2
    embed_dim: int = 32
    hidden: tuple = (32, 32)
    p: int = 2
    K: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.layers < 1 or len(self.hidden) != self.layers:
            raise ValueError("need one hidden size per capsule layer")
        if self.p < 1 or self.K < 0:
            raise ValueError("moment order p >= 1 and filter degree K >= 0 required")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.embed_dim < 1 or min(self.hidden) < 1:
            raise ValueError("layer sizes must be positive")

    @property
    def out_dim(self) -> int:
        return self.hidden[-1]

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (tuple(v) if k == "hidden" else v) for k, v in d.items()})


class ParamStore(OrderedDict):
    """Ordered mapping name -> Tensor (insertion order is the canonical order)."""

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), requires_grad=True)) for k, v in self.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.values()])


@dataclass
class PolicyOutput:
    logits: np.ndarray
    probs: np.ndarray
    value: np.ndarray
    mask: np.ndarray = field(default=None)


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(cfg: GcapcnConfig, n_nodes: int, n_lines: int, n_actions: int,
                rng: np.random.Generator) -> ParamStore:
    h = cfg.out_dim
    specs = [("embed.W", (3, cfg.embed_dim))]
    fan = cfg.embed_dim
    for layer, width in enumerate(cfg.hidden, start=1):
        for i in range(1, cfg.p + 1):
            for k in range(cfg.K + 1):
                specs.append((f"capsule.{layer}.W{i}{k}", (fan, width)))
        fan = width * cfg.p
    specs += [
        ("node.W", (fan, h)),
        ("graph.W_g1", (h, n_nodes)),
        ("graph.W_g2", (h, h)),
        ("context.W1", (2 + n_lines, h)),
        ("context.b1", (h,)),
        ("context.W2", (h, h)),
        ("context.b2", (h,)),
        ("decoder.mlp.W", (h, h)),
        ("decoder.mlp.b", (h,)),
        ("decoder.out.W", (h, n_actions)),
        ("decoder.out.b", (n_actions,)),
        ("value.W1", (h, h)),
        ("value.b1", (h,)),
        ("value.W2", (h, 1)),
        ("value.b2", (1,)),
    ]
    params = ParamStore()
    for name, shape in specs:
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = _glorot(rng, shape[0], shape[1])
        params[name] = Tensor(data, requires_grad=True)
    return params


def _act(x: Tensor, kind: str) -> Tensor:
    return x.tanh() if kind == "tanh" else x.relu()


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- stages


def embed_inputs(V, params) -> Tensor:
    """F0 = V @ W_embed."""
    V = _t(V)
    if V.shape[-1] != 3:
        raise ValueError(f"node features must have 3 columns, got {V.shape}")
    return V @ params["embed.W"]


def capsule_layer(F_prev, L, params, layer: int, p: int, K: int, activation: str = "tanh") -> Tensor:
    """One capsule graph convolution.

    Capsule ``i`` is ``act(sum_k L^k (F_prev ** i) W_ik)``; the ``p`` capsules
    are concatenated along the feature axis.
    """
    F_prev, L = _t(F_prev), _t(L)
    capsules = []
    for i in range(1, p + 1):
        X = F_prev ** i if i > 1 else F_prev
        acc = None
        for k in range(K + 1):
            term = X @ params[f"capsule.{layer}.W{i}{k}"]
            acc = term if acc is None else acc + term
            if k < K:
                X = L @ X
        capsules.append(_act(acc, activation))
    out = concat(capsules, axis=-1) if p > 1 else capsules[0]
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite activations in capsule layer {layer}")
    return out


def graph_embedding(F_nodes, params) -> Tensor:
    """Mean over the last axis of W_g2 @ (W_g1 @ F_nodes)."""
    F_nodes = _t(F_nodes)
    W1 = params["graph.W_g1"]
    if F_nodes.shape[-2] != W1.shape[1]:
        raise ValueError(f"policy is bound to {W1.shape[1]} nodes, got {F_nodes.shape[-2]}")
    return (params["graph.W_g2"] @ (W1 @ F_nodes)).mean(axis=-1)


def context_vector(e_supp, v_viol, flows) -> np.ndarray:
    """Concatenate ``[E_supp, V_viol, b_e...]`` (batch-aware)."""
    e = np.asarray(e_supp, dtype=float)
    v = np.asarray(v_viol, dtype=float)
    b = np.asarray(flows, dtype=float)
    return np.concatenate([e[..., None], v[..., None], b], axis=-1)


def context_encode(e_supp, v_viol, flows, params, activation: str = "tanh") -> Tensor:
    x = Tensor(context_vector(e_supp, v_viol, flows))
    if x.shape[-1] != params["context.W1"].shape[0]:
        raise ValueError(f"expected {params['context.W1'].shape[0] - 2} branch flows")
    hidden = _act(_row(x) @ params["context.W1"] + params["context.b1"], activation)
    return _unrow(hidden @ params["context.W2"] + params["context.b2"], x)


def action_logits(F_graph, F_context, params, activation: str = "tanh") -> Tensor:
    z = _t(F_graph) + _t(F_context)
    h = _act(_row(z) @ params["decoder.mlp.W"] + params["decoder.mlp.b"], activation)
    return _unrow(h @ params["decoder.out.W"] + params["decoder.out.b"], z)


def value_estimate(F_graph, F_context, params, activation: str = "tanh") -> Tensor:
    z = _t(F_graph) + _t(F_context)
    h = _act(_row(z) @ params["value.W1"] + params["value.b1"], activation)
    v = h @ params["value.W2"] + params["value.b2"]
    return _unrow(v, z).reshape(v.shape[:-1] if z.ndim > 1 else ())


def _row(z: Tensor) -> Tensor:
    return z.reshape(1, -1) if z.ndim == 1 else z


def _unrow(out: Tensor, z: Tensor) -> Tensor:
    return out.reshape(-1) if z.ndim == 1 else out


def mask_logits(logits, mask) -> Tensor:
    return where(np.asarray(mask, bool), MASK_LOGIT, _t(logits))


def mask_and_distribution(logits, mask) -> PolicyOutput:
    logits = np.asarray(getattr(logits, "data", logits), dtype=float)
    mask = np.asarray(mask, bool)
    masked = np.where(mask, MASK_LOGIT, logits)
    return PolicyOutput(masked, stable_sigmoid(masked), np.zeros(logits.shape[:-1]), mask)


def greedy_action(probs) -> np.ndarray:
    return np.asarray(probs) > 0.5


def sample_action(probs, rng: np.random.Generator, mask=None) -> tuple[np.ndarray, float]:
    """Independent Bernoulli draws and their summed log-probability.

    Masked slots are forced off and contribute nothing to the log-probability.
    """
    probs = np.asarray(probs, dtype=float)
    mask = np.zeros(probs.shape, bool) if mask is None else np.asarray(mask, bool)
    u = rng.random(probs.shape)
    action = (u < probs) & ~mask
    return action, float(bernoulli_log_prob(probs, action, mask))


def bernoulli_log_prob(probs, action, mask) -> np.ndarray:
    p = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    lp = np.where(action, np.log(p), np.log1p(-p))
    return np.where(mask, 0.0, lp).sum(axis=-1)


def log_prob_tensor(probs: Tensor, action, mask) -> Tensor:
    a = np.asarray(action, dtype=float)
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    lp = p.log() * a + (1.0 - p).log() * (1.0 - a)
    return where(np.asarray(mask, bool), 0.0, lp).sum(axis=-1)


def entropy_tensor(probs: Tensor, mask) -> Tensor:
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    ent = -(p * p.log() + (1.0 - p) * (1.0 - p).log())
    return where(np.asarray(mask, bool), 0.0, ent).sum(axis=-1)


# ---------------------------------------------------------------- the network


class GcapcnPolicy:
    """Bundles a config with its parameters; bound to one network size."""

    def __init__(self, cfg: GcapcnConfig, n_nodes: int, n_lines: int, n_actions: int,
                 rng: np.random.Generator | None = None, params: ParamStore | None = None):
        self.cfg = cfg
        self.n_nodes, self.n_lines, self.n_actions = n_nodes, n_lines, n_actions
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = init_params(cfg, n_nodes, n_lines, n_actions, rng)
        self.params = params

    def forward(self, V, L, e_supp, v_viol, flows, mask):
        """Differentiable pass; returns ``(probs, value, masked_logits)`` tensors."""
        c, P = self.cfg, self.params
        F = embed_inputs(V, P)
        for layer in range(1, c.layers + 1):
            F = capsule_layer(F, L, P, layer, c.p, c.K, c.activation)
        F_nodes = F @ P["node.W"]
        F_graph = graph_embedding(F_nodes, P)
        F_context = context_encode(e_supp, v_viol, flows, P, c.activation)
        logits = mask_logits(action_logits(F_graph, F_context, P, c.activation), mask)
        value = value_estimate(F_graph, F_context, P, c.activation)
        return logits.sigmoid(), value, logits

    def act(self, obs, L) -> PolicyOutput:
        """Forward pass on a single observation without building gradients."""
        probs, value, logits = self.forward(obs.V, L, obs.e_supp, obs.v_viol, obs.flows,
                                            obs.action_mask)
        return PolicyOutput(logits.data, probs.data, value.data, np.asarray(obs.action_mask, bool))


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PHGRIDCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, cfg: GcapcnConfig, tensors: "OrderedDict[str, np.ndarray]",
                    state: dict | None = None) -> None:
    """Write config, an ordered tensor list and a JSON-able state dict.

    Layout: magic, u32 version, u64 header length, JSON header (sorted keys),
    then every tensor as little-endian float64 in header order.
    """
    entries = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    header = json.dumps({"config": asdict(cfg), "tensors": entries, "state": state or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(config, OrderedDict name -> array, state)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(blob[20:20 + hlen])
    offset = 20 + hlen
    tensors = OrderedDict()
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing or missing data")
    return GcapcnConfig.from_dict(header["config"]), tensors, header["state"]


def save_policy(path, policy: GcapcnPolicy, state: dict | None = None, extra_tensors=None) -> None:
    tensors = OrderedDict((k, v.data) for k, v in policy.params.items())
    if extra_tensors:
        tensors.update(extra_tensors)
    state = dict(state or {})
    state["shape"] = [policy.n_nodes, policy.n_lines, policy.n_actions]
    save_checkpoint(path, policy.cfg, tensors, state)


def load_policy(path) -> tuple[GcapcnPolicy, dict, "OrderedDict[str, np.ndarray]"]:
    """Returns ``(policy, state, extra_tensors)``."""
    cfg, tensors, state = load_checkpoint(path)
    n_nodes, n_lines, n_actions = state["shape"]
    names = list(init_params(cfg, n_nodes, n_lines, n_actions, np.random.default_rng(0)))
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing}")
    params = ParamStore((n, Tensor(tensors.pop(n), requires_grad=True)) for n in names)
    return GcapcnPolicy(cfg, n_nodes, n_lines, n_actions, params=params), state, tensors
