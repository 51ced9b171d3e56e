"""Reconstruction-only purification across KLD targets: PSNR and victim accuracy."""
import argparse

from uepurify.attacks import AttackSpec, apply_poison, generate_attack
from uepurify.data import SynthConfig, generate_synthetic_dataset
from uepurify.dvae import DVAEConfig
from uepurify.evaluation import ClassifierConfig, kld_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--family", default="smooth")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--targets", default="0.25,0.5,1,2,3,6")
    ap.add_argument("--epochs", type=int, default=30)
    args = ap.parse_args()
    train, test = generate_synthetic_dataset(SynthConfig(train_per_class=200, test_per_class=100, seed=args.seed))
    P0, _ = apply_poison(train, generate_attack(train, AttackSpec(args.family), args.seed))
    points = kld_sweep(P0, [float(t) for t in args.targets.split(",")], test,
                       DVAEConfig(epochs=args.epochs, seed=args.seed), ClassifierConfig(seed=args.seed))
    print("kld_target  psnr_db  accuracy")
    for p in points:
        print(f"{p.kld_target:10g}  {p.psnr:7.2f}  {p.accuracy:8.3f}")


if __name__ == "__main__":
    main()
