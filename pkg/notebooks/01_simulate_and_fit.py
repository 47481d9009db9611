"""
Simulating a micro-randomized trial and fitting the mixed model
===============================================================

GM1 data: the covariate at each decision point is the previous outcome
plus noise, treatment is a fair coin, and each person has a random
intercept and a random treatment effect.
"""

# %%
import numpy as np

from mrtlmm import SimConfig, build_design, fit, predict_random_effects, satterthwaite_ci, simulate_gm
from mrtlmm.simulate import gm_model_spec, gm_truth

cfg = SimConfig(gm=1, n=100, T=30, seed=1)
data = simulate_gm(cfg)
print(data.n, "individuals,", data.n_obs, "observations")

# %%
# The analysis model has the same fixed and random terms as the generator.
spec = gm_model_spec(1)
bundle = build_design(data, spec)
print("fixed:", bundle.fixed_names)
print("random:", bundle.random_names)

# %%
res = fit(bundle, "REML")
truth = gm_truth(cfg)
for row in satterthwaite_ci(res, bundle):
    print(f"{row.name:12s} {row.estimate:7.3f}  ({row.ci_low:6.3f}, {row.ci_high:6.3f})  df={row.df:6.1f}  true={truth[row.name]}")

# %%
for name, value in res.variance_components().items():
    print(f"{name:18s} {value:.3f}  true={truth.get(name, float('nan'))}")

# %%
# Empirical Bayes predictions of each person's random effects.  People with
# noisier data are pulled harder toward zero.
pred = predict_random_effects(bundle, res)
print(pred.names)
print(np.round(pred.b_hat[:5], 3))
print(np.round(pred.cond_sd[:5], 3))
