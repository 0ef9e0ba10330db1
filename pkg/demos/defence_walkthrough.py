"""End-to-end walkthrough: synthesize a corpus, poison it with the greedy
token-substitution attack, then defend the pools and compare retrieval
metrics with and without the penalty terms.

Uses a deliberately small corpus so the whole script runs in well under a
minute; scale num_queries back up to 100 for the full-size experiment.
"""

from stressrank.harness import ExperimentConfig, run_pipeline
from stressrank.metrics import penalty_distributions
from stressrank.poison import PoisonRecipe, SyntheticCorpusSpec

cfg = ExperimentConfig(
    seed=0,
    corpus=SyntheticCorpusSpec(num_queries=12, seed=0),
    recipe=PoisonRecipe(budget_iters=20),
    k_values=(5, 10),
)
pipeline = run_pipeline(cfg)

print(f"{len(pipeline.results)} queries, "
      f"{sum(r.attacked for r in pipeline.results)} attacked "
      f"(poison crafted into the undefended top-k)\n")

rows = pipeline.metric_rows()
print(f"{'variant':>12} {'k':>3} {'PHR':>6} {'PRR':>6}")
for row in rows:
    if row["k"] != 5:
        continue
    print(f"{row['variant']:>12} {row['k']:>3} {row['phr']:>6.3f} {row['prr']:>6.3f}")
print()

# Penalty separation: how do the learned-nothing penalties distribute over
# clean vs poisoned passages in the defended rankings?
labels = pipeline.labels_map()
rankings = pipeline.eval_rankings("full")
dists = penalty_distributions(rankings, labels)
for signal in ("penalty_sum", "gate_weight", "correction"):
    by_class = dists[signal]
    parts = ", ".join(
        f"{cls}: mean {st.mean:+.3f} (n={st.count})"
        for cls, st in sorted(by_class.items())
        if st.count
    )
    print(f"{signal:>12}  {parts}")
