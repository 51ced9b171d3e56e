"""Two-stage purification, PSNR-guided KLD-target selection, ablations,
detection of unlearnable samples and amplification of a small UE split."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import PoisonMask
from .data import LabeledImageSet, psnr
from .dvae import DVAEConfig, TrainLog, infer_dvae, train_dvae
from .evaluation import ClassifierConfig, predict, train_classifier

log = logging.getLogger(__name__)

VARIANTS = ("no_s1", "no_i2", "no_s2", "no_i3", "s1_recon")


@dataclass
class PurifyConfig:
    kld1: float = 0.3
    kld2: float = 5.0
    epochs: int = 20  # per stage, unless a stage override says otherwise
    window1: tuple = (18.0, 24.0)  # probe-PSNR window used when selecting kld1
    window2: tuple = (26.0, 32.0)
    stage1: dict = field(default_factory=dict)  # DVAEConfig overrides per stage
    stage2: dict = field(default_factory=dict)
    clamp: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.kld1 < self.kld2:
            raise ValueError(f"need 0 <= kld1 < kld2, got {self.kld1}, {self.kld2}")
        for lo, hi in (self.window1, self.window2):
            if not lo < hi:
                raise ValueError(f"PSNR window ({lo}, {hi}) is empty")
        return self

    def dvae_config(self, stage: int, seed: int) -> DVAEConfig:
        kld, extra = (self.kld1, self.stage1) if stage == 1 else (self.kld2, self.stage2)
        return replace(DVAEConfig(), **{"epochs": self.epochs, **extra, "kld_target": kld, "seed": seed})


@dataclass
class PurifyReport:
    stage1_log: TrainLog
    stage2_log: TrainLog
    psnr_x0: float  # PSNR(x0, x̂0)
    psnr_x1: float  # PSNR(x1, x̂1)
    psnr_x2: float  # PSNR(x2, x̂2)
    kld1: float
    kld2: float
    sets: dict = field(default_factory=dict, repr=False)  # "P1", "P2", "P3", plus intermediates

    def summary(self) -> dict:
        return {"kld1": self.kld1, "kld2": self.kld2, "psnr_x0": self.psnr_x0, "psnr_x1": self.psnr_x1,
                "psnr_x2": self.psnr_x2, "stage1_probe_psnr": [e["probe_psnr"] for e in self.stage1_log.epochs],
                "stage2_probe_psnr": [e["probe_psnr"] for e in self.stage2_log.epochs]}


@dataclass
class DetectionReport:
    flags: np.ndarray
    accuracy: float
    recall: float
    precision: float
    f1: float

    @classmethod
    def from_flags(cls, flags, truth) -> "DetectionReport":
        flags, truth = np.asarray(flags, dtype=bool), np.asarray(truth, dtype=bool)
        tp = int(np.sum(flags & truth))
        recall = tp / truth.sum() if truth.any() else 0.0
        precision = tp / flags.sum() if flags.any() else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(flags, float(np.mean(flags == truth)), float(recall), float(precision), float(f1))

    def summary(self) -> dict:
        return {"flagged": int(self.flags.sum()), "n": len(self.flags), "accuracy": self.accuracy,
                "recall": self.recall, "precision": self.precision, "f1": self.f1}


def _subtract(ds: LabeledImageSet, p_hat: np.ndarray, clamp: bool) -> LabeledImageSet:
    out = ds.images - p_hat
    return ds.with_images(np.clip(out, 0, 1) if clamp else out)


def select_kld_target(ds: LabeledImageSet, stage: int, candidates, probe_cfg: DVAEConfig | None = None,
                      window=None) -> float:
    """Pick the kld target whose short-probe PSNR lands in the stage window.

    Among qualifying candidates stage 1 takes the largest and stage 2 the
    smallest; with none qualifying, the one closest to the window centre wins.
    """
    candidates = sorted(float(c) for c in candidates)
    if not candidates:
        raise ValueError("no kld candidates given")
    if stage not in (1, 2):
        raise ValueError("stage must be 1 or 2")
    lo, hi = window or (PurifyConfig.window1 if stage == 1 else PurifyConfig.window2)
    probe_cfg = probe_cfg or DVAEConfig(epochs=5)
    scores = {}
    for kld in candidates:
        _, tlog = train_dvae(ds, replace(probe_cfg, kld_target=kld))
        scores[kld] = tlog.final_psnr
        log.info("stage %d probe: kld %.3g -> PSNR %.2f dB", stage, kld, scores[kld])
    inside = [k for k in candidates if lo <= scores[k] <= hi]
    if inside:
        return inside[-1] if stage == 1 else inside[0]
    mid = (lo + hi) / 2
    best = min(candidates, key=lambda k: abs(scores[k] - mid))
    log.warning("no kld candidate reached the stage-%d window [%g, %g]; using %g (%.2f dB)",
                stage, lo, hi, best, scores[best])
    return best


def _run(P0: LabeledImageSet, cfg: PurifyConfig, seed: int) -> PurifyReport:
    cfg.validate()
    model1, log1 = train_dvae(P0, cfg.dvae_config(1, seed))
    recon0, p_hat0 = infer_dvae(model1, P0)
    P1 = _subtract(P0, p_hat0, cfg.clamp)

    model2, log2 = train_dvae(P1, cfg.dvae_config(2, seed + 1))
    recon1, p_hat1 = infer_dvae(model2, P1)
    P2 = _subtract(P1, p_hat1, cfg.clamp)
    P3, _ = infer_dvae(model2, P2)  # same stage-2 model, no retraining
    sets = {"P1": P1, "P2": P2, "P3": P3, "recon0": recon0, "recon1": recon1,
            "p_hat0": p_hat0, "p_hat1": p_hat1}
    return PurifyReport(log1, log2, psnr(P0.images, recon0.images), psnr(P1.images, recon1.images),
                        psnr(P2.images, P3.images), cfg.kld1, cfg.kld2, sets)


def two_stage_purify(P0: LabeledImageSet, cfg: PurifyConfig | None = None, seed: int = 0):
    """Stage 1 subtracts coarse perturbation estimates under the tight rate
    ``kld1``; stage 2 retrains from scratch at ``kld2``, subtracts its own
    estimates and returns the reconstruction of the result. Returns ``(P3, report)``."""
    report = _run(P0, cfg or PurifyConfig(), seed)
    return report.sets["P3"], report


def ablation_from_report(report: PurifyReport, variant: str) -> LabeledImageSet:
    """Variants that reuse the models of a full run (everything except ``no_s1``)."""
    key = {"no_i2": "recon1", "no_s2": "P1", "no_i3": "P2", "s1_recon": "recon0"}.get(variant)
    if key is None:
        raise ValueError(f"variant {variant!r} cannot be derived from a full run")
    return report.sets[key]


def ablation_variant(P0: LabeledImageSet, variant: str, cfg: PurifyConfig | None = None, seed: int = 0):
    """One of ``no_s1, no_i2, no_s2, no_i3, s1_recon``; see ``VARIANTS``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    cfg = (cfg or PurifyConfig()).validate()
    if variant != "no_s1":
        return ablation_from_report(_run(P0, cfg, seed), variant)
    # stage 2 alone, trained directly on the unlearnable set
    model2, _ = train_dvae(P0, cfg.dvae_config(2, seed + 1))
    _, p_hat = infer_dvae(model2, P0)
    recon, _ = infer_dvae(model2, _subtract(P0, p_hat, cfg.clamp))
    return recon


def detect_unlearnable(P0_mixed: LabeledImageSet, true_mask: PoisonMask, cfg: PurifyConfig | None = None,
                       seed: int = 0, clf_cfg: ClassifierConfig | None = None, probe: str = "reconstructed"):
    """Flag samples that a classifier trained on ``x + p̂`` gets right.

    ``probe="reconstructed"`` scores the training inputs ``x + p̂`` themselves;
    ``probe="original"`` scores each sample on its untouched input x instead.
    ``true_mask`` is used for the metrics only.
    """
    if probe not in ("original", "reconstructed"):
        raise ValueError(f"probe must be 'original' or 'reconstructed', got {probe!r}")
    if len(true_mask.flags) != len(P0_mixed):
        raise ValueError("mask length differs from the dataset")
    cfg = (cfg or PurifyConfig()).validate()
    model, _ = train_dvae(P0_mixed, cfg.dvae_config(1, seed))
    _, p_hat = infer_dvae(model, P0_mixed)
    P_hat = P0_mixed.with_images(np.clip(P0_mixed.images + p_hat, 0, 1))
    clf = train_classifier(P_hat, replace(clf_cfg or ClassifierConfig(), seed=seed))
    probe_set = P0_mixed if probe == "original" else P_hat
    flags = predict(clf, probe_set) == P0_mixed.labels
    return DetectionReport.from_flags(flags, true_mask.flags)


def amplify_ues(P_small: LabeledImageSet, T_rest: LabeledImageSet, cfg: PurifyConfig | None = None,
                seed: int = 0, min_steps: int = 3000) -> LabeledImageSet:
    """Learn p̂ from a small poisoned split and stamp it onto clean data:
    returns ``{clamp(x + p̂)} ∪ P_small``.

    A split of a few hundred samples gives only a handful of steps per epoch,
    so training runs for at least ``min_steps`` optimizer steps."""
    if P_small.class_count != T_rest.class_count or P_small.shape != T_rest.shape:
        raise ValueError("P_small and T_rest must share class count and image shape")
    if len(T_rest) == 0:
        return P_small.with_images(P_small.images.copy())
    cfg = (cfg or PurifyConfig()).validate()
    dcfg = cfg.dvae_config(1, seed)
    model, _ = train_dvae(P_small, replace(dcfg, min_steps=max(dcfg.min_steps, min_steps)))
    _, p_hat = infer_dvae(model, T_rest)
    stamped = np.clip(T_rest.images + p_hat, 0, 1)
    return LabeledImageSet(np.concatenate([stamped, P_small.images]),
                           np.concatenate([T_rest.labels, P_small.labels]), P_small.class_count)
