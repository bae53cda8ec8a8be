"""Sampled I-NDCG against full NDCG@k for a trained model and TopPop.

Prints both metrics for each scorer at several negative-sample sizes, so
rank disagreements between the sampled and full protocols are visible.
"""
import argparse

import torch

from simplerec.baselines import toppop_fit
from simplerec.experiment import CONFIG, evaluate_model, evaluate_toppop, synthetic_task, train_variant
from simplerec.metrics import indcg_sampled
from simplerec.ranker import embed_cold_users


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--negatives", type=int, nargs="+", default=[9, 19, 49])
    args = parser.parse_args()
    torch.set_num_threads(1)
    task = synthetic_task(args.seed)
    s, k = task.split, CONFIG.eval_k
    result, _ = train_variant(task)
    emb = embed_cold_users(result.model, s.training_graph(task.ckg), task.features,
                           {u: s.revealed[u] for u in s.cold_users})
    users = [u for u in s.cold_users if s.test.get(u)]
    pop = toppop_fit(s.training_graph(task.ckg).interactions(), task.ckg.n_items).astype(float)
    scorers = {
        "simplerec": {u: (emb[u] @ emb[: task.ckg.n_items].T).numpy() for u in users},
        "toppop": {u: pop for u in users},
    }
    full = {"simplerec": evaluate_model(result.model, task, k).mean("ndcg"),
            "toppop": evaluate_toppop(task, k).mean("ndcg")}
    positives = {u: s.test[u] for u in users}
    rated = {u: s.revealed[u] for u in users}
    print("scorer\tndcg@%d\t" % k + "\t".join(f"i-ndcg(N={n})" for n in args.negatives))
    for name, scores in scorers.items():
        row = [indcg_sampled(scores, positives, rated, n, args.seed).value for n in args.negatives]
        print(f"{name}\t{full[name]:.4f}\t" + "\t".join(f"{x:.4f}" for x in row))


if __name__ == "__main__":
    main()
