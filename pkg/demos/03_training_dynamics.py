"""
Effective rank during training
==============================

Follow the effective dimensionality of the encoder output and of the head
output at every validation snapshot of a monotonic run. The head output
starts very compressed and gains dimensions as the encoder adapts, while
the encoder output dips and partly recovers.
"""

# %%
from monocon import ModelConfig, fit, generate_synthetic, init_params
from monocon.experiments import REFERENCE_D_ENC, REFERENCE_SPEC, REFERENCE_TRAIN
from monocon.spectra import rank_trajectory

# %%
ds = generate_synthetic(REFERENCE_SPEC)
params = init_params(ModelConfig(d_in=ds.dim, d_enc=REFERENCE_D_ENC, head="monotonic"), REFERENCE_TRAIN.seed)
result = fit(ds, params, REFERENCE_TRAIN)

# %%
print("epoch  encoder  head_raw  head_norm  5-NN")
metric = {s["epoch"]: s["metric"] for s in result.log.snapshots}
for row in rank_trajectory(result.log.snapshots):
    print(f"{row['epoch']:5d}  {row['d_eff_encoder']:7d}  {row['d_eff_head_raw']:8d}  "
          f"{row['d_eff_head_normalized']:9d}  {metric[row['epoch']]:.4f}")
print("best epoch:", result.log.best_epoch, "stopped:", result.log.stopped_epoch)
