"""Unlearnable-example generators: class-wise smooth patches, one-pixel shortcuts,
and sample-wise error-minimizing noise, plus bound projection and poisoning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledImageSet, NormBound, PerturbationSet
from .evaluation import ClassifierConfig, augment_batch, build_classifier, evaluate

log = logging.getLogger(__name__)


@dataclass
class EMAttackConfig:
    epsilon: float = 8 / 255
    rounds: int = 10
    surrogate_epochs: int = 1
    steps: int = 10
    step_size: float | None = None  # defaults to epsilon / 5
    stop_accuracy: float = 0.99
    batch_size: int = 128
    seed: int = 0
    surrogate: ClassifierConfig = field(default_factory=lambda: ClassifierConfig(lr=0.1, cosine=False, augment=False))

    @property
    def bound(self) -> NormBound:
        return NormBound("linf", self.epsilon)

    @property
    def alpha(self) -> float:
        return self.epsilon / 5 if self.step_size is None else self.step_size

    def validate(self):
        if self.rounds < 1 or self.steps < 1 or self.alpha <= 0 or not 0 < self.stop_accuracy <= 1:
            raise ValueError("invalid EM attack config")
        return self


@dataclass
class PoisonMask:
    flags: np.ndarray
    ratio: float


def project_to_bound(deltas: np.ndarray, bound: NormBound) -> np.ndarray:
    """Project each sample of ``deltas`` (N, C, H, W) onto the feasible set."""
    d = np.asarray(deltas, dtype=np.float32)
    eps = bound.epsilon
    if bound.kind == "linf":
        e = np.float32(eps)
        return np.clip(d, -e, e)
    flat = d.reshape(len(d), -1)
    if bound.kind == "l2":
        norms = np.linalg.norm(flat.astype(np.float64), axis=1)
        scale = np.where(norms > eps, eps / np.maximum(norms, 1e-30), 1.0)
        out = flat * scale[:, None].astype(np.float32)
        # float32 rounding can leave the norm a hair above eps; shave until it is not
        over = np.linalg.norm(out.astype(np.float64), axis=1) > eps
        while np.any(over):
            out[over] = np.nextafter(out[over], np.float32(0))
            over = np.linalg.norm(out.astype(np.float64), axis=1) > eps
        return out.reshape(d.shape)
    # l0: keep the eps pixel positions with the largest per-pixel magnitude
    k = int(eps)
    n, c, h, w = d.shape
    mag = np.abs(d).sum(axis=1).reshape(n, -1)
    nonzero = mag > 0
    if np.all(nonzero.sum(axis=1) <= k):
        return d.copy()
    # stable sort on -mag keeps the lowest linear index among ties
    order = np.argsort(-mag, axis=1, kind="stable")[:, :k]
    keep = np.zeros_like(mag, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return np.where(keep.reshape(n, 1, h, w), d, 0).astype(np.float32)


def gen_classwise_smooth(ds: LabeledImageSet, epsilon_l2: float = 1.0, patch: int = 2, seed: int = 0) -> PerturbationSet:
    """Colour blocks of ``patch`` px per class, rescaled to l2 norm ``epsilon_l2``."""
    c, h, w = ds.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"patch {patch} must divide image size {h}x{w}")
    rng = np.random.default_rng(seed)
    patterns = np.empty((ds.class_count, c, h, w), dtype=np.float32)
    for k in range(ds.class_count):
        grid = rng.uniform(-1, 1, (c, h // patch, w // patch))
        up = np.repeat(np.repeat(grid, patch, axis=1), patch, axis=2)
        patterns[k] = up * (epsilon_l2 / np.linalg.norm(up))
    patterns = project_to_bound(patterns, NormBound("l2", epsilon_l2))
    return PerturbationSet(patterns[ds.labels], NormBound("l2", epsilon_l2), classwise=True,
                           meta={"attack": "smooth", "patch": patch})


def gen_one_pixel(ds: LabeledImageSet, seed: int = 0) -> PerturbationSet:
    """One class-specific pixel driven to a class-specific extreme colour."""
    c, h, w = ds.shape
    rng = np.random.default_rng(seed)
    pos = rng.integers(0, h * w, ds.class_count)
    targets = rng.integers(0, 2, (ds.class_count, c)).astype(np.float32)
    deltas = np.zeros_like(ds.images)
    rows, cols = np.divmod(pos[ds.labels], w)
    idx = np.arange(len(ds))
    current = ds.images[idx, :, rows, cols]  # (N, C)
    deltas[idx, :, rows, cols] = targets[ds.labels] - current
    return PerturbationSet(deltas, NormBound("l0", 1), classwise=True,
                           meta={"attack": "onepixel", "positions": pos.tolist(), "targets": targets.tolist()})


def gen_error_minimizing(ds: LabeledImageSet, cfg: EMAttackConfig | None = None) -> PerturbationSet:
    """Sample-wise min-min noise: alternate surrogate training and signed-gradient
    descent on the perturbations until the surrogate fits the poisoned data."""
    cfg = (cfg or EMAttackConfig()).validate()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    scfg = cfg.surrogate
    model = build_classifier(scfg, ds.class_count, ds.shape[0])
    opt = torch.optim.SGD(model.parameters(), lr=scfg.lr, momentum=scfg.momentum, weight_decay=scfg.weight_decay)
    x_c = torch.from_numpy(ds.images)
    y = torch.from_numpy(ds.labels)
    delta = torch.zeros_like(x_c)
    eps, alpha = cfg.epsilon, cfg.alpha
    acc = 0.0
    for rnd in range(cfg.rounds):
        model.train()
        for _ in range(cfg.surrogate_epochs):
            perm = torch.randperm(len(ds), generator=gen)
            for i in range(0, len(ds), cfg.batch_size):
                idx = perm[i : i + cfg.batch_size]
                xb = (x_c[idx] + delta[idx]).clamp(0, 1)
                if scfg.augment:
                    xb = augment_batch(xb, gen)
                loss = F.cross_entropy(model(xb), y[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        model.eval()
        for i in range(0, len(ds), cfg.batch_size):
            sl = slice(i, i + cfg.batch_size)
            d = delta[sl].clone()
            for _ in range(cfg.steps):
                d.requires_grad_(True)
                loss = F.cross_entropy(model((x_c[sl] + d).clamp(0, 1)), y[sl])
                (g,) = torch.autograd.grad(loss, d)
                d = (d.detach() - alpha * g.sign()).clamp(-eps, eps)
            delta[sl] = d.detach()
        poisoned = ds.with_images((x_c + delta).clamp(0, 1).numpy())
        acc = evaluate(model, poisoned)
        log.info("EM round %d: surrogate accuracy on poisoned data %.4f", rnd, acc)
        if acc >= cfg.stop_accuracy:
            break
    meta = {"attack": "em", "rounds": rnd + 1, "surrogate_accuracy": acc, "converged": acc >= cfg.stop_accuracy}
    if not meta["converged"]:
        log.warning("EM attack stopped after %d rounds at surrogate accuracy %.4f", rnd + 1, acc)
    deltas = project_to_bound(delta.numpy(), cfg.bound)
    return PerturbationSet(deltas, cfg.bound, classwise=False, meta=meta)


ATTACKS = ("em", "smooth", "onepixel")


@dataclass
class AttackSpec:
    kind: str = "smooth"
    smooth_epsilon: float = 1.0
    smooth_patch: int = 2
    em: EMAttackConfig = field(default_factory=EMAttackConfig)


def generate_attack(ds: LabeledImageSet, spec: AttackSpec, seed: int = 0) -> PerturbationSet:
    if spec.kind == "smooth":
        return gen_classwise_smooth(ds, spec.smooth_epsilon, spec.smooth_patch, seed)
    if spec.kind == "onepixel":
        return gen_one_pixel(ds, seed)
    if spec.kind == "em":
        return gen_error_minimizing(ds, replace(spec.em, seed=seed))
    raise ValueError(f"unknown attack {spec.kind!r}; expected one of {ATTACKS}")


def apply_poison(ds: LabeledImageSet, perturb: PerturbationSet, ratio: float = 1.0, seed: int = 0):
    """Perturb a stratified ``ratio`` of ``ds``; returns ``(poisoned, mask)``."""
    if perturb.deltas.shape != ds.images.shape:
        raise ValueError(f"shape mismatch {perturb.deltas.shape} vs {ds.images.shape}")
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    flags = np.zeros(len(ds), dtype=bool)
    if ratio == 1:
        flags[:] = True
    else:
        rng = np.random.default_rng(seed)
        for k in range(ds.class_count):
            idx = np.flatnonzero(ds.labels == k)
            flags[rng.permutation(idx)[: int(round(ratio * len(idx)))]] = True
    images = ds.images.copy()
    images[flags] = np.clip(ds.images[flags] + perturb.deltas[flags], 0, 1)
    return ds.with_images(images), PoisonMask(flags, ratio)
