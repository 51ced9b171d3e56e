"""Victim classifier, accuracy evaluation, disentanglement validation and KLD sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledImageSet, PerturbationSet
from .dvae import DVAEConfig, infer_dvae, train_dvae
from .errors import DivergenceError

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    arch: str = "resnet-small"
    width: int = 16
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    cosine: bool = True
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False  # flip + shift; see README for why it is off by default
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.arch != "resnet-small":
            raise ValueError(f"unknown classifier arch {self.arch!r}")
        return self


class _Block(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = nn.Identity()
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.short(x))


class SmallResNet(nn.Module):
    """Three residual stages (w, 2w, 4w channels); ~75k parameters at w=16."""

    def __init__(self, num_classes=10, in_ch=3, width=16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_ch, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.layers = nn.Sequential(
            _Block(width, width, 1),
            _Block(width, 2 * width, 2),
            _Block(2 * width, 4 * width, 2),
        )
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        out = self.layers(self.stem(x))
        return self.fc(F.adaptive_avg_pool2d(out, 1).flatten(1))


def build_classifier(cfg: ClassifierConfig, num_classes: int, in_ch: int) -> nn.Module:
    return SmallResNet(num_classes, in_ch, cfg.width)


def augment_batch(x: torch.Tensor, gen: torch.Generator, shift: int = 2) -> torch.Tensor:
    """Random horizontal flip plus a random translation of up to ``shift`` px (zero fill)."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    padded = F.pad(x, (shift, shift, shift, shift))
    oy = torch.randint(0, 2 * shift + 1, (n,), generator=gen)
    ox = torch.randint(0, 2 * shift + 1, (n,), generator=gen)
    rows = (oy[:, None] + torch.arange(h))[:, None, :, None].expand(n, x.shape[1], h, w + 2 * shift)
    out = padded.gather(2, rows)
    cols = (ox[:, None] + torch.arange(w))[:, None, None, :].expand(n, x.shape[1], h, w)
    return out.gather(3, cols)


def _as_tensors(ds: LabeledImageSet):
    return torch.from_numpy(ds.images), torch.from_numpy(ds.labels)


def train_classifier(ds: LabeledImageSet, cfg: ClassifierConfig | None = None) -> nn.Module:
    """Momentum SGD with cosine annealing; returns the final-epoch model in eval mode."""
    cfg = (cfg or ClassifierConfig()).validate()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = build_classifier(cfg, ds.class_count, ds.shape[0])
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    sched = None
    if cfg.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs * steps_per_epoch)
    x_all, y_all = _as_tensors(ds)
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(ds), generator=gen)
        for i in range(0, len(ds), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            if cfg.augment:
                x = augment_batch(x, gen)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"classifier loss became {loss.item()} in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if sched is not None:
                sched.step()
    return model.eval()


@torch.no_grad()
def predict(model: nn.Module, ds: LabeledImageSet, batch_size: int = 512) -> np.ndarray:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty set")
    model.eval()
    x = torch.from_numpy(ds.images)
    return np.concatenate([model(x[i : i + batch_size]).argmax(1).numpy() for i in range(0, len(x), batch_size)])


def evaluate(model: nn.Module, ds: LabeledImageSet) -> float:
    return float(np.mean(predict(model, ds) == ds.labels))


@dataclass
class EvalReport:
    """Accuracies on clean train (T), clean test (D) and the original UE set (P)."""

    accuracy_on_clean_train: float
    accuracy_on_clean_test: float
    accuracy_on_unlearnable: float
    counts: dict  # name -> (correct, total)

    @classmethod
    def from_predictions(cls, **pairs) -> "EvalReport":
        counts = {k: (int(np.sum(pred == y)), len(y)) for k, (pred, y) in pairs.items()}
        rate = {k: c / n for k, (c, n) in counts.items()}
        return cls(rate["T"], rate["D"], rate["P"], counts)


def disentanglement_validation(T_clean: LabeledImageSet, p_hat, P_original: LabeledImageSet,
                               D_test: LabeledImageSet, cfg: ClassifierConfig | None = None) -> EvalReport:
    """Stamp the predicted perturbations onto clean data, train on the result
    and report accuracy on T, D and the original unlearnable set P."""
    deltas = p_hat.deltas if isinstance(p_hat, PerturbationSet) else np.asarray(p_hat, dtype=np.float32)
    if deltas.shape != T_clean.images.shape or P_original.images.shape != T_clean.images.shape:
        raise ValueError("T_clean, p_hat and P_original must share one shape")
    if not np.array_equal(T_clean.labels, P_original.labels):
        raise ValueError("T_clean and P_original must be aligned sample by sample")
    stamped = T_clean.with_images(np.clip(T_clean.images + deltas, 0, 1))
    model = train_classifier(stamped, cfg)
    return EvalReport.from_predictions(
        T=(predict(model, T_clean), T_clean.labels),
        D=(predict(model, D_test), D_test.labels),
        P=(predict(model, P_original), P_original.labels),
    )


@dataclass
class SweepPoint:
    kld_target: float
    psnr: float  # final probe PSNR of the VAE
    accuracy: float  # clean-test accuracy after training on the reconstructions


def kld_sweep(P0: LabeledImageSet, targets, D_test: LabeledImageSet, dvae_cfg: DVAEConfig | None = None,
              clf_cfg: ClassifierConfig | None = None) -> list:
    """Reconstruction-only purification with a plain rate-constrained VAE
    (no auxiliary branch) at each target; one ``SweepPoint`` per target."""
    targets = sorted(float(t) for t in targets)
    if len(targets) < 3:
        raise ValueError("a sweep needs at least 3 targets")
    base = dvae_cfg or DVAEConfig()
    points = []
    for kld in targets:
        model, tlog = train_dvae(P0, replace(base, kld_target=kld, aux_weight=0))
        recon, _ = infer_dvae(model, P0)
        acc = evaluate(train_classifier(recon, clf_cfg), D_test)
        points.append(SweepPoint(kld, tlog.final_psnr, acc))
        log.info("sweep kld %.3g: PSNR %.2f dB, accuracy %.3f", kld, tlog.final_psnr, acc)
    return points
