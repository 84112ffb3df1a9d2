"""
Head ablation on synthetic features
===================================

Train the same adapter with no head, a standard MLP head and a monotonic
head on the reference synthetic data, then compare accuracy, effective
dimensionality and robustness to PCA truncation. Takes a few minutes on
one CPU core.
"""

# %%
from monocon import generate_synthetic
from monocon.experiments import (
    REFERENCE_D_ENC,
    REFERENCE_SPEC,
    REFERENCE_TRAIN,
    ablation_table,
    compression_grid,
    run_ablation,
)

# %%
ds = generate_synthetic(REFERENCE_SPEC)
runs = run_ablation(ds, REFERENCE_TRAIN, REFERENCE_D_ENC)

# %% [markdown]
# One row per head. The "_at_ref" columns use the monotonic model's d_eff
# as the common truncation size.

# %%
for row in ablation_table(runs):
    print({k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})

# %% [markdown]
# Accuracy and Recall@1 as each embedding is truncated to fewer PCA
# components.

# %%
ks = [2, 4, 6, 8, 12, 16, 32]
for name, run in runs.items():
    grid = compression_grid(run.pca, run.gallery_emb, run.gallery_labels, run.query_emb, run.query_labels,
                            [k for k in ks if k <= run.gallery_emb.shape[1]], 5)
    print(name, [(r["k"], round(r["recall@1"], 3)) for r in grid])

# %% [markdown]
# Feature-correlation structure: block score of the best dendrogram cut.

# %%
for name, run in runs.items():
    print(f"{name:9s} block score {run.report.block_score:.3f}")
