"""Train a small pipeline, harden it with module-wise adversarial fine-tuning,
and compare both models under white-box attacks.

    python demos/quickstart.py [--scenarios 600] [--seed 0]
"""

import argparse

from ma2t import driving as dr
from ma2t import evaluation as ev
from ma2t import trainer as tr


def table(matrix):
    print(f"{'row':28s} {'avg_l2':>8s} {'min_ade':>8s} {'det_err':>8s}")
    for i, row in enumerate(matrix.rows):
        print(f"{row:28s} {matrix.mean[i, 0]:8.3f} {matrix.mean[i, 1]:8.3f} {matrix.mean[i, 4]:8.3f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenarios", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, val = dr.build_dataset(dr.DatasetConfig(seed=args.seed, n_scenarios=args.scenarios))
    print(f"{len(train)} training / {len(val)} validation scenarios")

    vanilla = tr.pretrain_clean(train, tr.TrainConfig("clean", epochs=10, seed=args.seed)).checkpoint
    result = tr.finetune_ma2t(vanilla, train, tr.TrainConfig("ma2t", epochs=2, seed=args.seed,
                                                             update_period=4))
    print("module loss weights after fine-tuning:", result.dwaa.W.round(3))

    attacks = [ev.image_attack("pgd", "linf", restarts=1), ev.module_attack(restarts=1)]
    for name, ck in (("vanilla", vanilla), ("ma2t", result.checkpoint)):
        print(f"\n== {name}")
        table(ev.evaluate_whitebox(ck, val, attacks, restarts=1, n_samples=100))


if __name__ == "__main__":
    main()
