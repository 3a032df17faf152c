"""Closed-loop driving with and without a universal raster perturbation.

The perturbation is crafted once on the clean model and added to every frame
the planner sees. The rule-based expert is shown as a reference.

    python demos/closed_loop.py [--episodes 20]
"""

import argparse

from ma2t import attacks as at
from ma2t import driving as dr
from ma2t import simulator as sm
from ma2t import trainer as tr


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--eps", type=float, default=0.2)
    args = ap.parse_args()

    train, _ = dr.build_dataset(dr.DatasetConfig(seed=0, n_scenarios=600))
    vanilla = tr.pretrain_clean(train, tr.TrainConfig("clean", epochs=10)).checkpoint
    hardened = tr.finetune_ma2t(vanilla, train, tr.TrainConfig("ma2t", epochs=2)).checkpoint
    delta = at.universal_noise(vanilla.to_pipeline(), train, args.eps, epochs=2)

    cfg = sm.SimConfig(n_episodes=args.episodes, delta=delta, epsilon=args.eps)
    expert = sm.run_closed_loop(sm.ExpertPlanner(), sm.SimConfig(n_episodes=args.episodes))
    print(f"{'expert':10s} clean     score {expert.driving_score:.3f}")
    for name, condition, summary in sm.compare_defenses({"vanilla": vanilla, "ma2t": hardened}, cfg):
        print(f"{name:10s} {condition:9s} score {summary['driving_score']:.3f}  "
              f"completion {summary['completion_rate']:.3f}  collisions {summary['collision_rate']:.2f}")


if __name__ == "__main__":
    main()
