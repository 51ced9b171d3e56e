"""Detection of UEs under partial poisoning and amplification of a small UE split."""
import argparse
import json

from uepurify.attacks import AttackSpec, apply_poison, generate_attack
from uepurify.data import SynthConfig, generate_synthetic_dataset, split_dataset
from uepurify.evaluation import ClassifierConfig, evaluate, train_classifier
from uepurify.pipeline import PurifyConfig, amplify_ues, detect_unlearnable


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ratios", default="0.2,0.4,0.6,0.8")
    ap.add_argument("--fraction", type=float, default=0.05)
    ap.add_argument("--families", default="smooth,onepixel,em")
    ap.add_argument("--probe", default="reconstructed", choices=["reconstructed", "original"])
    args = ap.parse_args()
    train, test = generate_synthetic_dataset(SynthConfig(train_per_class=200, test_per_class=100, seed=args.seed))
    clf = ClassifierConfig(seed=args.seed)
    for family in args.families.split(","):
        perturb = generate_attack(train, AttackSpec(family), args.seed)
        for ratio in map(float, args.ratios.split(",")):
            P0, mask = apply_poison(train, perturb, ratio, args.seed)
            r = detect_unlearnable(P0, mask, PurifyConfig(), args.seed, clf, args.probe)
            print(json.dumps({"task": "detect", "family": family, "ratio": ratio, **r.summary()}), flush=True)
        small, rest = split_dataset(train, args.fraction, args.seed)
        P_small, _ = apply_poison(small, generate_attack(small, AttackSpec(family), args.seed))
        amplified = amplify_ues(P_small, rest, PurifyConfig(), args.seed)
        print(json.dumps({"task": "amplify", "family": family, "fraction": args.fraction,
                          "victim_test_accuracy": evaluate(train_classifier(amplified, clf), test)}), flush=True)


if __name__ == "__main__":
    main()
