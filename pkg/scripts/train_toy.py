"""Train the tiny LLGG and hourglass models on the stripe task and write metric traces."""

import argparse

from uniformer_kit.config import tiny_config
from uniformer_kit.model import build_model
from uniformer_kit.train import SyntheticTask, TrainConfig, train, write_metrics


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    args = p.parse_args()
    for types in ("LLGG", "LLHH"):
        model = build_model(tiny_config(types), seed=args.seed)
        trace = train(model, SyntheticTask(seed=args.seed), TrainConfig(steps=args.steps, seed=args.seed))
        write_metrics(trace, f"{args.out}/metrics_{types.lower()}.csv")
        best = max(r.train_acc for r in trace)
        print(f"{types}: final loss {trace[-1].loss:.4f}, final acc {trace[-1].train_acc:.4f}, best {best:.4f}")


if __name__ == "__main__":
    main()
