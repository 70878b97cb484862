"""The ICAM network: AAFM encoder plus an adaptation-biased pointer decoder.

All tensors carry a leading batch axis. Node embeddings are ``(B, M, d)``
where ``M`` is the node count (cities for TSP, depot + customers for CVRP).
Decoder quantities carry a second axis ``P`` for the parallel multi-start
trajectories of one instance.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, InfeasibleError, NumericError
from .instances import CVRP, TSP, pairwise_distances
from .params import ParameterStore, load_checkpoint, save_checkpoint

# additive bias marking a node as excluded inside AAFM pooling
MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    problem: str = TSP
    embed_dim: int = 128
    ff_dim: int = 512
    encoder_layers: int = 12
    clip: float = 50.0
    alpha_init: float = 1.0
    alpha_sharing: str = "per-layer"  # or "shared"
    alpha_trainable: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.problem not in (TSP, CVRP):
            raise ContractError(f"unknown problem {self.problem!r}")
        if min(self.embed_dim, self.ff_dim, self.encoder_layers) <= 0 or self.clip <= 0:
            raise ContractError("model dimensions and clip must be positive")
        if self.alpha_sharing not in ("per-layer", "shared"):
            raise ContractError(f"alpha_sharing must be 'per-layer' or 'shared', not {self.alpha_sharing!r}")

    def to_dict(self):
        return asdict(self)


FULL_CONFIG = dict(embed_dim=128, ff_dim=512, encoder_layers=12, clip=50.0, alpha_init=1.0)


# ---------------------------------------------------------------- parameters

def alpha_names(cfg):
    if cfg.alpha_sharing == "shared":
        return ["alpha"]
    names = [f"encoder.layer{i}.alpha" for i in range(cfg.encoder_layers)]
    return names + ["decoder.alpha", "decoder.compat_alpha"]


def init_params(cfg, seed=0):
    """Linear weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    d, f = cfg.embed_dim, cfg.ff_dim
    store = ParameterStore()

    def lin(name, fan_in, fan_out, bias=True):
        bound = 1.0 / math.sqrt(fan_in)
        store.add(f"{name}.w", rng.uniform(-bound, bound, (fan_in, fan_out)))
        if bias:
            store.add(f"{name}.b", rng.uniform(-bound, bound, (fan_out,)))

    if cfg.problem == TSP:
        lin("embed", 2, d)
    else:
        lin("embed_depot", 2, d)
        lin("embed", 3, d)
    for i in range(cfg.encoder_layers):
        p = f"encoder.layer{i}"
        for w in ("wq", "wk", "wv"):
            lin(f"{p}.aafm.{w}", d, d, bias=False)
        lin(f"{p}.aafm.out", d, d)
        store.add(f"{p}.norm1.scale", np.ones(d))
        store.add(f"{p}.norm1.shift", np.zeros(d))
        lin(f"{p}.ff.fc1", d, f)
        lin(f"{p}.ff.fc2", f, d)
        store.add(f"{p}.norm2.scale", np.ones(d))
        store.add(f"{p}.norm2.shift", np.zeros(d))
    if cfg.problem == TSP:
        lin("decoder.q_first", d, d, bias=False)
    else:
        lin("decoder.q_load", 1, d, bias=False)
    lin("decoder.q_last", d, d, bias=False)
    lin("decoder.wk", d, d, bias=False)
    lin("decoder.wv", d, d, bias=False)
    lin("decoder.out", d, d)
    for name in alpha_names(cfg):
        store.add(name, np.array(cfg.alpha_init, dtype=np.float64))
    return store


def trainable_names(cfg, params):
    frozen = set() if cfg.alpha_trainable else set(alpha_names(cfg))
    return [n for n in params.names() if n not in frozen]


# ---------------------------------------------------------------- building blocks

def linear(x, params, name):
    out = ag.matmul(x, params[f"{name}.w"])
    bname = f"{name}.b"
    if bname in params:
        out = out + ag.broadcast_to(params[bname], out.shape)
    return out


def affine_norm(h, params, name, eps):
    z = ag.instance_norm(h, eps)
    return z * ag.broadcast_to(params[f"{name}.scale"], z.shape) + ag.broadcast_to(params[f"{name}.shift"], z.shape)


def adaptation_bias(n, d, alpha=1.0):
    """``A_ij = -alpha * log2(n) * d_ij``.

    ``alpha`` may be a float or a 0-d Tensor; the result type follows it.
    """
    if n < 2:
        raise ContractError(f"adaptation bias needs scale n >= 2, got {n}")
    base = -math.log2(n) * np.asarray(d, dtype=np.float64)
    if isinstance(alpha, Tensor):
        return alpha * Tensor(base)
    return alpha * base


def _row_max(a):
    m = a.max(axis=-1, keepdims=True)
    if np.any(m <= MASK_BIAS / 2):
        raise InfeasibleError("AAFM row with every key masked")
    return m


def _shifted_exp(x, shift):
    return ag.exp(x - Tensor(np.broadcast_to(shift, x.shape)))


def key_terms(k, v):
    """Column-stabilised ``exp(K)`` and ``exp(K) * V``; reusable across queries."""
    ek = _shifted_exp(k, k.data.max(axis=-2, keepdims=True))
    return ek, ek * v


def pool(q, a, ek, ekv):
    w = _shifted_exp(a, _row_max(a.data))
    num = ag.matmul(w, ekv)
    den = ag.matmul(w, ek)
    if np.any(den.data <= 0.0):
        raise NumericError("AAFM denominator underflowed to zero")
    return ag.sigmoid(q) * (num / den)


def aafm(q, k, v, a):
    """``sigmoid(Q) * (exp(A) @ (exp(K) * V)) / (exp(A) @ exp(K))``.

    ``q``: (..., Nq, d); ``k``, ``v``: (..., Nkv, d); ``a``: (..., Nq, Nkv).
    Row maxima of ``A`` and column maxima of ``K`` are factored out of both
    sums, which cancels exactly and keeps every exponent <= 0.
    Entries of ``A`` at or below ``MASK_BIAS`` exclude a key.
    """
    q, k, v, a = (ag.as_tensor(t) for t in (q, k, v, a))
    if a.shape[:-2] != q.shape[:-2] or a.shape[-2:] != (q.shape[-2], k.shape[-2]) or k.shape != v.shape:
        raise ContractError(f"aafm shapes q{q.shape} k{k.shape} v{v.shape} a{a.shape}")
    ek, ekv = key_terms(k, v)
    return pool(q, a, ek, ekv)


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    """Same-size instances stacked for the network.

    ``demand`` is demand / capacity (CVRP); ``dist`` is the full distance tensor.
    """

    problem: str
    coords: np.ndarray
    dist: np.ndarray
    n: int
    demand: np.ndarray = None
    demand_int: np.ndarray = None
    capacity: np.ndarray = None

    @property
    def size(self):
        return self.coords.shape[0]

    @property
    def num_nodes(self):
        return self.coords.shape[1]

    @classmethod
    def from_arrays(cls, problem, coords, demands=None, capacity=None):
        coords = np.asarray(coords, dtype=np.float64)
        dist = pairwise_distances(coords)
        if problem == TSP:
            return cls(TSP, coords, dist, coords.shape[1])
        demands = np.asarray(demands, dtype=np.int64)
        capacity = np.asarray(capacity, dtype=np.int64).reshape(-1)
        return cls(CVRP, coords, dist, coords.shape[1] - 1, demands / capacity[:, None], demands, capacity)

    @classmethod
    def from_instances(cls, instances):
        problem = instances[0].problem
        if any(i.problem != problem or i.num_nodes != instances[0].num_nodes for i in instances):
            raise ContractError("a batch needs instances of one problem and one size")
        coords = np.stack([i.coords for i in instances])
        if problem == TSP:
            return cls.from_arrays(TSP, coords)
        return cls.from_arrays(
            CVRP, coords, np.stack([i.demands for i in instances]), np.array([i.capacity for i in instances])
        )


# ---------------------------------------------------------------- the model

@dataclass
class EncoderOutput:
    H: Tensor
    mean_embed: np.ndarray


class ICAM:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        missing = set(init_params(config, 0).names()) ^ set(self.params.names())
        if missing:
            raise ContractError(f"parameter set does not match config: {sorted(missing)[:5]}")

    # alpha lookup per use site
    def alpha(self, site):
        if self.config.alpha_sharing == "shared":
            return self.params["alpha"]
        return self.params[site]

    def alphas(self):
        return {name: float(self.params[name].data) for name in alpha_names(self.config)}

    def embed(self, batch):
        p = self.params
        if batch.problem == TSP:
            return linear(Tensor(batch.coords), p, "embed")
        depot = linear(Tensor(batch.coords[:, :1]), p, "embed_depot")
        feats = np.concatenate([batch.coords[:, 1:], batch.demand[:, 1:, None]], axis=-1)
        return ag.concat([depot, linear(Tensor(feats), p, "embed")], axis=1)

    def encode(self, batch, scale=None):
        """``scale`` overrides the N used in the adaptation bias (default: node count)."""
        cfg, p = self.config, self.params
        if batch.problem != cfg.problem:
            raise ContractError(f"model built for {cfg.problem}, batch is {batch.problem}")
        base = Tensor(adaptation_bias(scale or batch.num_nodes, batch.dist))
        h = self.embed(batch)
        for i in range(cfg.encoder_layers):
            pre = f"encoder.layer{i}"
            a = self.alpha(f"{pre}.alpha") * base
            att = aafm(
                ag.matmul(h, p[f"{pre}.aafm.wq.w"]),
                ag.matmul(h, p[f"{pre}.aafm.wk.w"]),
                ag.matmul(h, p[f"{pre}.aafm.wv.w"]),
                a,
            )
            h = affine_norm(h + linear(att, p, f"{pre}.aafm.out"), p, f"{pre}.norm1", cfg.norm_eps)
            ff = linear(ag.relu(linear(h, p, f"{pre}.ff.fc1")), p, f"{pre}.ff.fc2")
            h = affine_norm(h + ff, p, f"{pre}.norm2", cfg.norm_eps)
        return EncoderOutput(h, h.data.mean(axis=1))

    def decoder(self, batch, enc, first):
        return Decoder(self, batch, enc, first)

    # checkpoints carry the few config values that cannot be read off shapes
    def save(self, path, dtype=np.float64):
        arrays = self.params.arrays()
        arrays["meta.problem"] = np.array(0.0 if self.config.problem == TSP else 1.0)
        arrays["meta.clip"] = np.array(self.config.clip)
        arrays["meta.alpha_trainable"] = np.array(float(self.config.alpha_trainable))
        arrays["meta.norm_eps"] = np.array(self.config.norm_eps)
        save_checkpoint(path, arrays, dtype=dtype)

    @classmethod
    def load(cls, path):
        arrays = load_checkpoint(path)
        meta = {k[5:]: float(arrays.pop(k)) for k in list(arrays) if k.startswith("meta.")}
        layers = sum(1 for k in arrays if k.endswith(".aafm.wq.w"))
        cfg = ModelConfig(
            problem=TSP if meta.get("problem", 0.0) == 0.0 else CVRP,
            embed_dim=arrays["decoder.wk.w"].shape[0],
            ff_dim=arrays["encoder.layer0.ff.fc1.w"].shape[1],
            encoder_layers=layers,
            clip=meta.get("clip", 50.0),
            alpha_sharing="shared" if "alpha" in arrays else "per-layer",
            alpha_trainable=bool(meta.get("alpha_trainable", 1.0)),
            norm_eps=meta.get("norm_eps", 1e-5),
        )
        cfg.alpha_init = float(arrays[alpha_names(cfg)[0]])
        return cls(cfg, ParameterStore({k: v.astype(np.float64) for k, v in arrays.items()}))


class Decoder:
    """Per-rollout cache of everything that does not change between steps."""

    def __init__(self, model, batch, enc, first):
        p = model.params
        self.model = model
        self.batch = batch
        self.clip = model.config.clip
        H = enc.H
        B, M, d = H.shape
        self.scale = 1.0 / math.sqrt(d)
        self.bidx = np.arange(B)[:, None]
        self.ek, self.ekv = key_terms(ag.matmul(H, p["decoder.wk.w"]), ag.matmul(H, p["decoder.wv.w"]))
        self.HT = ag.swapaxes(H)
        self.q_last_all = ag.matmul(H, p["decoder.q_last.w"])
        self.q_first = None
        if batch.problem == TSP:
            self.q_first = ag.index(ag.matmul(H, p["decoder.q_first.w"]), (self.bidx, first))
        self.base = adaptation_bias(batch.num_nodes, batch.dist)
        self.alpha_pool = model.alpha("decoder.alpha")
        self.alpha_compat = model.alpha("decoder.compat_alpha")

    def logits(self, cur, mask, load=None):
        """Clipped compatibilities ``u`` (B, P, M) for the current step; masked entries unused."""
        p = self.model.params
        q = ag.index(self.q_last_all, (self.bidx, cur))
        if self.q_first is not None:
            q = q + self.q_first
        else:
            q = q + ag.matmul(Tensor(load[..., None]), p["decoder.q_load.w"])
        rows = Tensor(self.base[self.bidx, cur])
        a = self.alpha_pool * rows + Tensor(np.where(mask, MASK_BIAS, 0.0))
        ctx = linear(pool(q, a, self.ek, self.ekv), p, "decoder.out")
        score = ag.matmul(ctx, self.HT) * self.scale + self.alpha_compat * rows
        return ag.tanh(score) * self.clip
