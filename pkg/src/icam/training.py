"""REINFORCE with a shared multi-start baseline, top-k elite loss and the staged schedule."""

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import tomli
import tomli_w

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DomainError, ICAMError, NumericError
from .instances import CVRP, TSP
from .model import ICAM, Batch, ModelConfig, trainable_names
from .rollout import construct


# ---------------------------------------------------------------- losses

def advantage(returns):
    """``G = R - mean_i R`` per instance (rows)."""
    returns = np.asarray(returns, dtype=np.float64)
    return returns - returns.mean(axis=1, keepdims=True)


def _reinforce(logp, adv):
    B, K = adv.shape
    return -(Tensor(adv) * logp).sum() * (1.0 / (B * K))


def pomo_loss(logp, returns):
    """Negated policy-gradient surrogate averaged over B instances x N trajectories."""
    return _reinforce(logp, advantage(returns))


def topk_indices(returns, k):
    """Per row, the k largest returns (ties to the lower index), listed in index order."""
    returns = np.asarray(returns)
    if k > returns.shape[1] or k < 1:
        raise ContractError(f"k={k} outside 1..{returns.shape[1]}")
    top = np.argsort(-returns, axis=1, kind="stable")[:, :k]
    return np.sort(top, axis=1)


def topk_loss(logp, returns, k, baseline="full"):
    """Surrogate restricted to the k best trajectories per instance.

    ``baseline="full"`` keeps the advantage computed against all N
    trajectories; ``"subset"`` re-centres on the k selected ones.
    """
    returns = np.asarray(returns, dtype=np.float64)
    idx = topk_indices(returns, k)
    rows = np.arange(returns.shape[0])[:, None]
    if baseline == "full":
        adv = advantage(returns)[rows, idx]
    elif baseline == "subset":
        adv = advantage(returns[rows, idx])
    else:
        raise ContractError(f"unknown top-k baseline {baseline!r}")
    return _reinforce(ag.index(logp, (rows, idx)), adv)


def joint_loss(logp, returns, beta, k, baseline="full"):
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta={beta} outside [0, 1]")
    return pomo_loss(logp, returns) + beta * topk_loss(logp, returns, k, baseline)


# ---------------------------------------------------------------- optimiser

class Adam:
    def __init__(self, tensors, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for t, m, v in zip(self.tensors, self.m, self.v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_norm(tensors):
    return math.sqrt(sum(float((t.grad * t.grad).sum()) for t in tensors if t.grad is not None))


def clip_grad_norm(tensors, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(tensors)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


# ---------------------------------------------------------------- configuration

@dataclass
class StagePlan:
    name: str
    epochs: int
    scale: tuple = (100, 100)
    capacity: tuple = (50, 50)
    batch_base: int = 256
    batch_ref: int = 100
    loss: str = "pomo"
    lr: float = 1e-4
    beta: float = 0.1
    k: int = 20

    def __post_init__(self):
        self.scale = tuple(int(v) for v in self.scale)
        self.capacity = tuple(int(v) for v in self.capacity)
        if self.scale[0] > self.scale[1] or self.capacity[0] > self.capacity[1]:
            raise ContractError(f"stage {self.name}: unordered bounds")
        if self.loss not in ("pomo", "joint"):
            raise ContractError(f"stage {self.name}: unknown loss {self.loss!r}")
        if self.lr <= 0 or self.k < 1 or not 0.0 <= self.beta <= 1.0:
            raise ContractError(f"stage {self.name}: invalid lr / k / beta")

    def batch_size(self, n):
        """``floor(base * (ref / n)^2)``, at least 1."""
        return max(1, math.floor(self.batch_base * (self.batch_ref / n) ** 2 + 1e-9))


@dataclass
class TrainingConfig:
    problem: str = TSP
    model: ModelConfig = None
    stages: list = field(default_factory=list)
    batches_per_epoch: int = 1000
    grad_clip: float = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    topk_baseline: str = "full"

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig(problem=self.problem)
        if self.model.problem != self.problem:
            raise ContractError("model and training problem differ")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        for s in d["stages"]:
            s["scale"], s["capacity"] = list(s["scale"]), list(s["capacity"])
        if d["grad_clip"] is None:
            d["grad_clip"] = 0.0
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        problem = d.get("problem", TSP)
        model = ModelConfig(**{"problem": problem, **d.pop("model", {})})
        stages = [StagePlan(**s) for s in d.pop("stages", [])]
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        if not d.get("grad_clip"):
            d["grad_clip"] = None
        return cls(model=model, stages=stages, **d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def full_preset(problem=TSP):
    """Full-scale schedule and model of the reference setting."""
    cvrp = problem == CVRP
    base = 128 if cvrp else 160
    stages = [
        StagePlan("warmup", 100, (100, 100), (50, 50), 128 if cvrp else 256, 100, "pomo", 1e-4),
        StagePlan("varying", 700 if cvrp else 2200, (100, 500), (50, 100), base, 100, "pomo", 1e-4),
        StagePlan("elite", 200, (100, 500), (50, 100), base, 100, "joint", 1e-5, beta=0.1, k=20),
    ]
    return TrainingConfig(
        problem=problem,
        model=ModelConfig(problem=problem),
        stages=stages,
        batches_per_epoch=1000,
        grad_clip=5.0 if cvrp else None,
    )


def desk_preset(problem=TSP, batches_per_epoch=20):
    """Three-stage schedule sized for a single CPU core.

    Scales 10 -> Unif[10, 50]; the batch-size rule is anchored at N = 10.
    """
    cvrp = problem == CVRP
    stages = [
        StagePlan("warmup", 20, (10, 10), (20, 20), 64, 10, "pomo", 1e-3),
        StagePlan("varying", 60, (10, 50), (20, 40), 64, 10, "pomo", 1e-3),
        StagePlan("elite", 20, (10, 50), (20, 40), 64, 10, "joint", 1e-4, beta=0.1, k=20),
    ]
    return TrainingConfig(
        problem=problem,
        model=ModelConfig(problem=problem, embed_dim=64, ff_dim=128, encoder_layers=3),
        stages=stages,
        batches_per_epoch=batches_per_epoch,
        grad_clip=5.0 if cvrp else None,
        checkpoint_every=10,
    )


PRESETS = {"full": full_preset, "desk": desk_preset}


def load_config(path):
    with open(path, "rb") as fh:
        return TrainingConfig.from_dict(tomli.load(fh))


def dump_config(cfg):
    return tomli_w.dumps(cfg.to_dict())


# ---------------------------------------------------------------- training loop

class TrainingDiverged(ICAMError):
    pass


def sample_batch(problem, plan, rng):
    """Instance batch of one sampled scale; CVRP capacity is drawn once per batch."""
    n = int(rng.integers(plan.scale[0], plan.scale[1] + 1))
    bs = plan.batch_size(n)
    if problem == TSP:
        return Batch.from_arrays(TSP, rng.random((bs, n, 2)))
    coords = rng.random((bs, n + 1, 2))
    demands = np.concatenate([np.zeros((bs, 1), dtype=np.int64), rng.integers(1, 10, (bs, n))], axis=1)
    cap = int(rng.integers(plan.capacity[0], plan.capacity[1] + 1))
    return Batch.from_arrays(CVRP, coords, demands, np.full(bs, cap))


def stage_loss(plan, logp, returns, topk_baseline="full"):
    if plan.loss == "pomo":
        return pomo_loss(logp, returns)
    return joint_loss(logp, returns, plan.beta, min(plan.k, returns.shape[1]), topk_baseline)


def train_step(model, opt, plan, batch, rng, cfg, names):
    con = construct(model, batch, None, "sample", rng)
    returns = -con.lengths
    loss = stage_loss(plan, con.logp, returns, cfg.topk_baseline)
    model.params.zero_grad()
    ag.backward(loss)
    tensors = [model.params[n] for n in names]
    norm = clip_grad_norm(tensors, cfg.grad_clip) if cfg.grad_clip else grad_norm(tensors)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    opt.lr = plan.lr
    opt.step()
    return float(loss.data), con.lengths, norm


METRIC_FIELDS = ["epoch", "stage", "mean_length", "loss", "alpha", "seconds", "mean_best_length", "mean_scale", "grad_norm"]


@dataclass
class TrainResult:
    model: ICAM
    metrics: list
    checkpoints: list


def train(cfg, model=None, seed=None, hooks=(), out_dir=None, log=None):
    """Run every stage in order; returns the trained model, per-epoch metrics and checkpoint paths.

    ``hooks`` are called with each epoch's metric dict. With ``out_dir`` the
    metrics CSV and checkpoints are written there.
    """
    seed = cfg.seed if seed is None else seed
    model = model or ICAM(cfg.model, seed=seed)
    names = trainable_names(cfg.model, model.params)
    opt = Adam([model.params[n] for n in names], cfg.stages[0].lr if cfg.stages else 1e-4, cfg.adam_betas, cfg.adam_eps)
    metrics, ckpts = [], []
    writer = fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, METRIC_FIELDS + sorted(model.alphas()))
        writer.writeheader()
    epoch = 0
    try:
        for si, plan in enumerate(cfg.stages):
            for _ in range(plan.epochs):
                t0 = time.perf_counter()
                lens, bests, losses, scales, norms = [], [], [], [], []
                for b in range(cfg.batches_per_epoch):
                    rng = np.random.default_rng([seed, si, epoch, b])
                    batch = sample_batch(cfg.problem, plan, rng)
                    try:
                        loss, lengths, norm = train_step(model, opt, plan, batch, rng, cfg, names)
                    except (NumericError, DomainError) as exc:
                        _dump_diagnostic(out_dir, seed, si, epoch, b, model, exc)
                        raise TrainingDiverged(f"stage {plan.name} epoch {epoch} batch {b}: {exc}") from exc
                    losses.append(loss)
                    lens.append(lengths.mean())
                    bests.append(lengths.min(axis=1).mean())
                    scales.append(batch.n)
                    norms.append(norm)
                alphas = model.alphas()
                row = {
                    "epoch": epoch,
                    "stage": plan.name,
                    "mean_length": float(np.mean(lens)),
                    "loss": float(np.mean(losses)),
                    "alpha": float(np.mean(list(alphas.values()))),
                    "seconds": time.perf_counter() - t0,
                    "mean_best_length": float(np.mean(bests)),
                    "mean_scale": float(np.mean(scales)),
                    "grad_norm": float(np.mean(norms)),
                    **alphas,
                }
                metrics.append(row)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                if log:
                    log(f"epoch {epoch:4d} [{plan.name}] len {row['mean_length']:.4f} best {row['mean_best_length']:.4f} "
                        f"loss {row['loss']:+.4f} alpha {row['alpha']:.3f} {row['seconds']:.1f}s")
                for hook in hooks:
                    hook(row)
                epoch += 1
                if out_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    ckpts.append(_save(model, out_dir, f"epoch{epoch}.bin"))
            if out_dir:
                ckpts.append(_save(model, out_dir, f"stage{si + 1}-{plan.name}.bin"))
        if out_dir:
            ckpts.append(_save(model, out_dir, "final.bin"))
    finally:
        if fh:
            fh.close()
    return TrainResult(model, metrics, ckpts)


def _save(model, out_dir, name):
    path = os.path.join(out_dir, name)
    model.save(path)
    return path


def _dump_diagnostic(out_dir, seed, stage, epoch, batch, model, exc):
    if not out_dir:
        return
    info = {
        "error": str(exc),
        "batch_seed": [seed, stage, epoch, batch],
        "alpha": model.alphas(),
        "grad_norms": {n: float(np.sqrt((t.grad ** 2).sum())) for n, t in model.params.items() if t.grad is not None},
    }
    with open(os.path.join(out_dir, "diagnostic.json"), "w") as fh:
        json.dump(info, fh, indent=2)
