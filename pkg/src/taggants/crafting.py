"""Gradient-alignment crafting of bounded waveform perturbations.

For every key, the summed training gradient of the poisons assigned to it
should point the same way as the key's own gradient on the surrogate. The
perturbations are optimized with Adam on signed gradients and projected back
into the amplitude box after every step.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import LabeledDataset, PerturbationSet, PoisonPlan
from .model import ModelParams

log = logging.getLogger(__name__)


class CraftingError(RuntimeError):
    pass


@dataclass
class CraftConfig:
    steps: int = 250
    step_size: float = 2e-5
    clip_bound: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    restarts: int = 1
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.clip_bound <= 0 or self.steps < 0 or self.restarts < 1 or self.batch_size < 1:
            raise ValueError("need clip_bound > 0, steps >= 0, restarts >= 1, batch_size >= 1")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class AlignmentTrace:
    losses: list[float]
    key_cosines: list[float]
    restart: int
    restart_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    def to_dict(self) -> dict:
        return asdict(self)


def _cosine_terms(key_grads: torch.Tensor, sums: torch.Tensor) -> torch.Tensor:
    """Per-key ``1 - cos``; a zero poison sum counts as cosine 0."""
    key_norm = key_grads.norm(dim=-1)
    if torch.any(key_norm == 0):
        raise ValueError("key gradients must be non-zero")
    sum_norm = sums.norm(dim=-1)
    dots = (key_grads * sums).sum(-1)
    cos = torch.where(sum_norm > 0, dots / (key_norm * sum_norm.clamp_min(1e-300)), torch.zeros_like(dots))
    return 1.0 - cos


def alignment_loss(key_grads, poison_grad_sums) -> float:
    """Mean over keys of ``1 - cos(key gradient, summed poison gradient)``; lies in [0, 2]."""
    k = torch.as_tensor(np.asarray(key_grads, dtype=np.float64))
    s = torch.as_tensor(np.asarray(poison_grad_sums, dtype=np.float64))
    if k.ndim == 1:
        k, s = k[None], s[None]
    if k.shape != s.shape or k.shape[0] < 1:
        raise ValueError("need matching (K, P) gradient arrays with K >= 1")
    return float(_cosine_terms(k, s).mean())


def _float_bound(bound: float, dtype: torch.dtype) -> float:
    # largest value representable in dtype that does not exceed bound
    b = torch.tensor(bound, dtype=dtype)
    if float(b) > bound:
        b = torch.nextafter(b, torch.tensor(0.0, dtype=dtype))
    return float(b)


class _Objective:
    def __init__(self, surrogate: ModelParams, x0, labels, groups, key_grads, batch_size):
        self.model = surrogate.module
        self.params = surrogate.trainable()
        self.x0 = x0
        self.labels = labels
        self.groups = groups
        self.key_grads = key_grads
        self.batch_size = batch_size

    def _grad_sum(self, idx, delta, create_graph):
        xb = self.x0[idx] + delta[idx]
        loss = F.cross_entropy(self.model(xb), self.labels[idx], reduction="sum")
        grads = torch.autograd.grad(loss, self.params, create_graph=create_graph)
        return torch.cat([g.reshape(-1) for g in grads])

    def __call__(self, delta: torch.Tensor, with_grad: bool = True):
        """Return ``(mean loss, per-key cosines, d loss / d delta or None)``."""
        n_keys = len(self.groups)
        grad_out = torch.zeros_like(delta) if with_grad else None
        cosines = []
        total = 0.0
        for i, idx in enumerate(self.groups):
            if len(idx) == 0:
                cosines.append(0.0)
                total += 1.0
                continue
            kg = self.key_grads[i]
            if len(idx) <= self.batch_size:
                d = delta.detach().requires_grad_(with_grad)
                with torch.enable_grad():
                    g = self._grad_sum(idx, d, create_graph=with_grad)
                    term = _cosine_terms(kg[None], g[None])[0]
                    if with_grad:
                        (gd,) = torch.autograd.grad(term / n_keys, d)
                        grad_out += gd
            else:
                term = self._chunked(idx, kg, delta, grad_out, n_keys)
            value = term.item()
            total += value
            cosines.append(1.0 - value)
        return total / n_keys, cosines, grad_out

    def _chunked(self, idx, kg, delta, grad_out, n_keys):
        # pass 1: the full poison gradient sum, no graph
        chunks = [idx[s : s + self.batch_size] for s in range(0, len(idx), self.batch_size)]
        with torch.enable_grad():
            total_sum = sum(self._grad_sum(c, delta.detach(), create_graph=False) for c in chunks)
        term = _cosine_terms(kg[None], total_sum[None])[0]
        if grad_out is None:
            return term
        s_norm, k_norm = total_sum.norm(), kg.norm()
        if s_norm == 0:
            return term
        cos = 1.0 - term
        # d(1 - cos)/d sum, then chain through each chunk's gradient
        v = -(kg / (k_norm * s_norm) - cos * total_sum / s_norm**2) / n_keys
        for c in chunks:
            d = delta.detach().requires_grad_(True)
            with torch.enable_grad():
                g = self._grad_sum(c, d, create_graph=True)
                (gd,) = torch.autograd.grad(torch.dot(g, v), d)
            grad_out += gd
        return term


def key_gradients(surrogate: ModelParams, keys) -> torch.Tensor:
    model = surrogate.module
    model.eval()
    params = surrogate.trainable()
    rows = []
    for entry in keys.keys:
        x = torch.as_tensor(np.asarray(entry.clip.samples), dtype=surrogate.dtype)[None]
        loss = F.cross_entropy(model(x), torch.tensor([entry.label]))
        grads = torch.autograd.grad(loss, params)
        rows.append(torch.cat([g.reshape(-1) for g in grads]))
    return torch.stack(rows).detach()


def craft(
    surrogate: ModelParams,
    ds: LabeledDataset,
    plan: PoisonPlan,
    keys,
    cfg: CraftConfig,
) -> tuple[PerturbationSet, AlignmentTrace]:
    """Optimize the perturbations of the planned poisons against a frozen surrogate.

    Restart 0 starts from zero; further restarts start from a seeded uniform
    draw inside the box. Within a restart the best iterate seen is kept, so
    the returned loss never exceeds the starting loss.
    """
    if len(keys.keys) != len(plan.key_labels) or any(
        e.label != y for e, y in zip(keys.keys, plan.key_labels)
    ):
        raise ValueError("poison plan was built for a different key set")
    model = surrogate.module
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    dtype = surrogate.dtype
    index = ds.index()
    ids = plan.poison_ids
    x0 = torch.as_tensor(np.stack([index[i].clip.samples for i in ids]), dtype=dtype)
    labels = torch.tensor([index[i].label for i in ids])
    pos = {item_id: n for n, item_id in enumerate(ids)}
    groups = []
    for i in range(len(plan.key_labels)):
        members = plan.partition.get(i, ())
        if not members:
            warnings.warn(f"key {i} has no poisons; its alignment term stays at 1", stacklevel=2)
        groups.append(torch.tensor([pos[m] for m in members], dtype=torch.long))
    objective = _Objective(surrogate, x0, labels, groups, key_gradients(surrogate, keys), cfg.batch_size)

    bound = _float_bound(cfg.clip_bound, dtype)
    lo, hi = torch.clamp(-1.0 - x0, min=-bound), torch.clamp(1.0 - x0, max=bound)
    rng = np.random.default_rng(cfg.seed)
    best = None
    restart_losses = []
    for r in range(cfg.restarts):
        if r == 0:
            delta = torch.zeros_like(x0)
        else:
            delta = torch.as_tensor(rng.uniform(-bound, bound, size=tuple(x0.shape)), dtype=dtype)
            delta = torch.maximum(torch.minimum(delta, hi), lo)
        delta.requires_grad_(True)
        opt = torch.optim.Adam([delta], lr=cfg.step_size, betas=cfg.betas, eps=cfg.adam_eps)
        losses = []
        run_best = (float("inf"), None, None)
        for step in range(cfg.steps + 1):
            last = step == cfg.steps
            loss, cosines, grad = objective(delta.detach(), with_grad=not last)
            if not np.isfinite(loss):
                raise CraftingError(f"alignment loss became non-finite at step {step}")
            losses.append(loss)
            if loss < run_best[0]:
                run_best = (loss, delta.detach().clone(), cosines)
            if last:
                break
            delta.grad = grad.sign()
            opt.step()
            with torch.no_grad():
                delta.copy_(torch.maximum(torch.minimum(delta, hi), lo))
            if step % 25 == 0:
                log.info("restart %d step %d alignment loss %.4f", r, step, loss)
        restart_losses.append(run_best[0])
        if best is None or run_best[0] < best[0][0]:
            best = (run_best, losses, r)

    (final_loss, best_delta, cosines), losses, chosen = best
    deltas = {
        item_id: best_delta[n].numpy().astype(np.float32) for n, item_id in enumerate(ids)
    }
    trace = AlignmentTrace(
        losses=losses,
        key_cosines=list(cosines),
        restart=chosen,
        restart_losses=restart_losses,
        final_loss=final_loss,
    )
    return PerturbationSet(deltas, cfg.clip_bound), trace
