"""
A monotonic head, forward and backward
======================================

Square the weights, keep the activation non-decreasing, and the head can
only move its outputs up when its inputs move up. This walks through one
forward pass by hand, checks the ordering property on random pairs, and
verifies the contrastive gradient against finite differences.
"""

# %%
import numpy as np

from monocon import ModelConfig, check_monotone, forward_model, init_params, supcon_loss
from monocon import tensor as T
from monocon.models import LayerParams, ModelParams, forward_head, monotone_pairs_ok, param_leaves

# %% [markdown]
# A 1 -> 1 -> 1 head with W1 = [2], W2 = [1]. The effective first weight is
# 4, so x = -1 gives a pre-activation of -4 and a leaky output of -0.04.

# %%
enc = [LayerParams(np.eye(1), np.zeros((1, 1)), False, "identity")]
head = [LayerParams(np.array([[2.0]]), np.zeros((1, 1)), True, "leaky_relu"),
        LayerParams(np.array([[1.0]]), np.zeros((1, 1)), True, "identity")]
tiny = ModelParams(enc, head, "monotonic", 0.01)
print("raw output:", forward_head(np.array([[-1.0]]), tiny)["raw"].value)

# %% [markdown]
# Ordering check: sample x <= x' componentwise and compare raw outputs.
# The standard head has signed weights and usually fails somewhere.

# %%
mono = init_params(ModelConfig(d_in=16, d_enc=8, head="monotonic"), seed=0)
print("monotonic head ordered on 1000 pairs:", check_monotone(mono, trials=1000))

rng = np.random.default_rng(0)
std = init_params(ModelConfig(d_in=16, d_enc=8, head="standard"), seed=0)
x = rng.normal(size=(1000, 8))
x_up = x + rng.exponential(size=x.shape)
report: list = []
print("standard head ordered on 1000 pairs:", monotone_pairs_ok(std, x, x_up, report))
if report:
    lo, hi = report[0][2], report[0][3]
    print("first violation, outputs that went down:", np.flatnonzero(lo > hi))

# %% [markdown]
# Gradient of the loss through adapter, head and normalization, compared
# with central differences on one encoder weight matrix.

# %%
rng = np.random.default_rng(1)
params = init_params(ModelConfig(d_in=10, d_enc=8, head="monotonic"), seed=1)
x = rng.normal(size=(16, 10))
y = np.repeat(np.arange(4), 4)


def loss_at(w: np.ndarray) -> float:
    p = params.copy()
    p.encoder_layers[0].weight = w
    return supcon_loss(forward_model(x, p)["head_normalized"], y, 0.1).value[0, 0]


leaves = param_leaves(params)  # aligned with params.named_arrays(); leaf 0 is encoder.0.weight
T.backward(supcon_loss(forward_model(x, params, leaves)["head_normalized"], y, 0.1))

w0, h = params.encoder_layers[0].weight, 1e-5
fd = np.zeros_like(w0)
for idx in np.ndindex(*w0.shape):
    e = np.zeros_like(w0)
    e[idx] = h
    fd[idx] = (loss_at(w0 + e) - loss_at(w0 - e)) / (2 * h)
print("relative error:", np.linalg.norm(leaves[0].grad - fd) / np.linalg.norm(fd))
