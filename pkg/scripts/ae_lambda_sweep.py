"""Cold-user NDCG@10 on the synthetic block fixture across auto-encoder loss weights."""
import argparse

import torch

from simplerec.experiment import synthetic_task, train_variant


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 0.5, 1.0, 2.0])
    args = parser.parse_args()
    torch.set_num_threads(1)
    print("seed\t" + "\t".join(f"lambda={x:g}" for x in args.lambdas))
    for seed in range(args.seeds):
        task = synthetic_task(seed)
        row = [train_variant(task, ae_lambda=x)[1].mean("ndcg") for x in args.lambdas]
        print(f"{seed}\t" + "\t".join(f"{x:.4f}" for x in row), flush=True)


if __name__ == "__main__":
    main()
