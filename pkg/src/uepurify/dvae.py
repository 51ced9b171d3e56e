"""Rate-constrained VAE with an auxiliary perturbation decoder (D-VAE).

The encoder maps x to (mu, sigma); the main decoder reconstructs x from z and
the auxiliary decoder predicts the additive perturbation from ``u_y + z``,
where ``u_y`` is a trainable latent-shaped embedding for class y.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledImageSet, psnr
from .errors import DivergenceError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOGVAR_RANGE = (-12.0, 6.0)


@dataclass
class DVAEConfig:
    latent_channels: int = 4
    width: int = 16
    downsample: int = 2
    kld_target: float = 1.0
    lam: float = 100.0
    aux_weight: float = 1.0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    cosine: bool = True
    embed_lr_scale: float = 10.0  # class embeddings must outgrow the latent noise quickly
    min_steps: int = 0  # lower bound on optimizer steps, for very small training sets
    probe_size: int = 256
    seed: int = 0

    def validate(self):
        if self.kld_target < 0 or self.lam <= 0 or self.epochs < 1:
            raise ValueError("need kld_target >= 0, lam > 0, epochs >= 1")
        if self.aux_weight not in (0, 1, 0.0, 1.0):
            raise ValueError("aux_weight switches the recover term on (1) or off (0)")
        if self.downsample not in (1, 2, 4):
            raise ValueError("downsample must be 1, 2 or 4")
        return self


@dataclass
class LatentCode:
    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor


def _conv(cin, cout, k=3, stride=1, norm=True):
    conv = nn.Conv2d(cin, cout, k, stride, (k - 1) // 2 if stride == 1 else 1, bias=not norm)
    return nn.Sequential(conv, nn.BatchNorm2d(cout) if norm else nn.Identity(), nn.LeakyReLU(0.2))


class Encoder(nn.Module):
    """Five conv stages; strided stages implement the spatial downsampling."""

    def __init__(self, in_ch, width, latent, downsample):
        super().__init__()
        n_down = int(math.log2(downsample))
        layers = [_conv(in_ch, width), _conv(width, width)]
        ch = width
        for _ in range(n_down):
            layers.append(_conv(ch, 2 * width, 4, 2))
            ch = 2 * width
        while len(layers) < 5:
            layers.append(_conv(ch, ch))
        self.body = nn.Sequential(*layers)
        self.mu = nn.Conv2d(ch, latent, 1)
        self.logvar = nn.Conv2d(ch, latent, 1)

    def forward(self, x):
        h = self.body(x)
        return self.mu(h), self.logvar(h).clamp(*LOGVAR_RANGE)


class Decoder(nn.Module):
    """Four conv stages with nearest-neighbour upsampling back to input size.

    No batch statistics here: the auxiliary decoder sees ``u_y + z``, whose
    per-batch class mix would otherwise leak into the normalization.
    """

    def __init__(self, out_ch, width, latent, downsample, squash):
        super().__init__()
        n_up = int(math.log2(downsample))
        ch = 2 * width if n_up else width
        layers = [_conv(latent, ch, norm=False)]
        for _ in range(n_up):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv(ch, width, norm=False)]
            ch = width
        while len(layers) - n_up < 3:
            layers.append(_conv(ch, width, norm=False))
            ch = width
        layers.append(nn.Conv2d(ch, out_ch, 3, 1, 1))
        self.body = nn.Sequential(*layers)
        self.squash = squash

    def forward(self, z):
        return self.squash(self.body(z))


class DVAE(nn.Module):
    def __init__(self, cfg: DVAEConfig, in_shape, num_classes):
        super().__init__()
        c, h, w = in_shape
        if h % cfg.downsample or w % cfg.downsample:
            raise ValueError(f"image size {h}x{w} not divisible by {cfg.downsample}")
        self.in_shape = tuple(in_shape)
        self.num_classes = num_classes
        self.latent_shape = (cfg.latent_channels, h // cfg.downsample, w // cfg.downsample)
        self.encoder = Encoder(c, cfg.width, cfg.latent_channels, cfg.downsample)
        self.decoder = Decoder(c, cfg.width, cfg.latent_channels, cfg.downsample, torch.sigmoid)
        self.aux_decoder = Decoder(c, cfg.width, cfg.latent_channels, cfg.downsample, torch.tanh)
        self.embeddings = nn.Parameter(torch.randn(num_classes, *self.latent_shape))


def encode(x: torch.Tensor, noise: torch.Tensor, model: DVAE) -> LatentCode:
    if tuple(x.shape[1:]) != model.in_shape:
        raise ValueError(f"input shape {tuple(x.shape[1:])} != {model.in_shape}")
    mu, logvar = model.encoder(x)
    if noise.shape != mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent {tuple(mu.shape)}")
    sigma = torch.exp(0.5 * logvar)
    return LatentCode(mu, sigma, mu + sigma * noise)


def decode_recon(z: torch.Tensor, model: DVAE) -> torch.Tensor:
    if tuple(z.shape[1:]) != model.latent_shape:
        raise ValueError(f"latent shape {tuple(z.shape[1:])} != {model.latent_shape}")
    return model.decoder(z)


def decode_perturbation(z: torch.Tensor, y: torch.Tensor, model: DVAE) -> torch.Tensor:
    y = torch.as_tensor(y)
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return model.aux_decoder(model.embeddings[y] + z)


def kld_term(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) in nats per latent dimension, batch-averaged."""
    if torch.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    per_dim = -0.5 * (1 + torch.log(sigma**2) - mu**2 - sigma**2)
    return per_dim.flatten(1).mean(1).mean()


def dvae_loss(x, y, noise, model: DVAE, cfg: DVAEConfig):
    """Distortion + aux_weight * recover + lam * max(kld, target).

    The recover target ``x - x_hat`` is detached, so the recover term only
    trains the auxiliary decoder, the embeddings and (through z) the encoder.
    """
    code = encode(x, noise, model)
    x_hat = decode_recon(code.z, model)
    residual = x - x_hat
    distortion = residual.pow(2).flatten(1).sum(1).mean()
    kld = kld_term(code.mu, code.sigma)
    rate = cfg.lam * torch.clamp(kld, min=cfg.kld_target)
    total = distortion + rate
    if cfg.aux_weight:
        p_hat = decode_perturbation(code.z, y, model)
        recover = (residual.detach() - p_hat).pow(2).flatten(1).sum(1).mean()
        total = total + cfg.aux_weight * recover
    else:
        recover = torch.zeros((), dtype=x.dtype)
    return total, {"distortion": distortion, "recover": recover, "rate": rate, "kld": kld}


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # one dict per epoch

    @property
    def final_psnr(self) -> float:
        return self.epochs[-1]["probe_psnr"]

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"]


def build_dvae(cfg: DVAEConfig, in_shape, num_classes) -> DVAE:
    torch.manual_seed(cfg.seed)
    return DVAE(cfg, in_shape, num_classes)


def train_dvae(ds: LabeledImageSet, cfg: DVAEConfig | None = None, seed: int | None = None):
    """Adam on the D-VAE loss, no augmentation. Returns ``(model, TrainLog)``."""
    cfg = (cfg or DVAEConfig()).validate()
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = DVAE(cfg, ds.shape, ds.class_count)
    nets = [p for name, p in model.named_parameters() if name != "embeddings"]
    opt = torch.optim.Adam([{"params": nets}, {"params": [model.embeddings], "lr": cfg.lr * cfg.embed_lr_scale}], lr=cfg.lr)
    x_all, y_all = torch.from_numpy(ds.images), torch.from_numpy(ds.labels)
    probe = np.random.default_rng(seed).permutation(len(ds))[: cfg.probe_size]
    steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
    epochs = max(cfg.epochs, math.ceil(cfg.min_steps / steps_per_epoch))
    sched = None
    if cfg.cosine:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs * steps_per_epoch)
    train_log = TrainLog()
    for epoch in range(epochs):
        model.train()
        sums = {"loss": 0.0, "distortion": 0.0, "recover": 0.0, "rate": 0.0, "kld": 0.0}
        perm = torch.randperm(len(ds), generator=gen)
        for i in range(0, len(ds), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            noise = torch.randn((len(idx), *model.latent_shape), generator=gen)
            total, parts = dvae_loss(x, y, noise, model, cfg)
            if not torch.isfinite(total):
                raise DivergenceError(f"D-VAE loss became {total.item()} in epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            sums["loss"] += total.item() * len(idx)
            for k in ("distortion", "recover", "rate", "kld"):
                sums[k] += parts[k].item() * len(idx)
        rec = {k: v / len(ds) for k, v in sums.items()}
        x_hat, _ = infer_arrays(model, ds.subset(probe))
        rec["epoch"] = epoch
        rec["probe_psnr"] = psnr(ds.images[probe], x_hat)
        train_log.epochs.append(rec)
        log.debug("dvae epoch %d %s", epoch, rec)
    model.eval()
    return model, train_log


@torch.no_grad()
def infer_arrays(model: DVAE, ds: LabeledImageSet, batch_size: int = 512):
    """Deterministic inference (z = mu): returns ``(x_hat, p_hat)`` as float32 arrays."""
    was_training = model.training
    model.eval()
    xs, ps = [], []
    x_all, y_all = torch.from_numpy(ds.images), torch.from_numpy(ds.labels)
    for i in range(0, len(ds), batch_size):
        x, y = x_all[i : i + batch_size], y_all[i : i + batch_size]
        code = encode(x, torch.zeros((len(x), *model.latent_shape)), model)
        xs.append(decode_recon(code.z, model).numpy())
        ps.append(decode_perturbation(code.z, y, model).numpy())
    model.train(was_training)
    return np.concatenate(xs).astype(np.float32), np.concatenate(ps).astype(np.float32)


def infer_dvae(model: DVAE, ds: LabeledImageSet):
    """Returns ``(recon_set, p_hat)``; labels pass through unchanged."""
    if ds.labels.min() < 0 or ds.labels.max() >= model.num_classes:
        raise ValueError("label outside the model's class range")
    x_hat, p_hat = infer_arrays(model, ds)
    return ds.with_images(x_hat), p_hat


def save_checkpoint(model: DVAE, cfg: DVAEConfig, path) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "config": asdict(cfg), "in_shape": model.in_shape,
                "num_classes": model.num_classes, "state": model.state_dict()}, path)


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {blob.get('version')} != {CHECKPOINT_VERSION}")
    cfg = DVAEConfig(**blob["config"])
    model = DVAE(cfg, blob["in_shape"], blob["num_classes"])
    model.load_state_dict(blob["state"])
    return model.eval(), cfg
