"""Victim accuracy per attack family: no defence, two-stage purification and
every ablation variant. Prints one row per (family, seed)."""
import argparse
import json
import time

from uepurify.attacks import AttackSpec, apply_poison, generate_attack
from uepurify.data import SynthConfig, generate_synthetic_dataset
from uepurify.evaluation import ClassifierConfig, evaluate, train_classifier
from uepurify.pipeline import PurifyConfig, ablation_from_report, ablation_variant, two_stage_purify


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--families", default="em,smooth,onepixel")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--per-class", type=int, default=200)
    ap.add_argument("--no-s1", action="store_true", help="also train the stage-2-only variant (slower)")
    args = ap.parse_args()
    rows = []
    for seed in map(int, args.seeds.split(",")):
        train, test = generate_synthetic_dataset(SynthConfig(train_per_class=args.per_class,
                                                             test_per_class=args.per_class // 2, seed=seed))
        clf = ClassifierConfig(seed=seed)
        acc = lambda ds: evaluate(train_classifier(ds, clf), test)
        clean = acc(train)
        for family in args.families.split(","):
            t = time.perf_counter()
            P0, _ = apply_poison(train, generate_attack(train, AttackSpec(family), seed))
            P3, report = two_stage_purify(P0, PurifyConfig(), seed)
            row = {"family": family, "seed": seed, "clean": clean, "none": acc(P0), "full": acc(P3)}
            for variant in ("no_i2", "no_s2", "no_i3", "s1_recon"):
                row[variant] = acc(ablation_from_report(report, variant))
            if args.no_s1:
                row["no_s1"] = acc(ablation_variant(P0, "no_s1", PurifyConfig(), seed))
            row.update(psnr=[round(report.psnr_x0, 2), round(report.psnr_x1, 2), round(report.psnr_x2, 2)],
                       seconds=round(time.perf_counter() - t))
            rows.append(row)
            print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
