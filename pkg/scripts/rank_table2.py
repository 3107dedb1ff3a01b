"""Recompute the mean-rank column of the bundled model comparison table.

Dense ranks per metric (ties share a rank, NaN ranks last) averaged over the
eight metrics, printed next to the published values.
"""

from gapkit.evaltasks import load_reference_table, rank_models


def main():
    table = load_reference_table()
    ranking = rank_models(table["models"], table["directions"])
    print(f"{'model':<12}{'mean rank':>10}{'published':>11}  NaN metrics")
    for e in ranking:
        published = table["reported_rank"][e.model]
        flag = ", ".join(e.nan_metrics)
        print(f"{e.model:<12}{e.mean_rank:10.3f}{published:11.2f}  {flag}")


if __name__ == "__main__":
    main()
