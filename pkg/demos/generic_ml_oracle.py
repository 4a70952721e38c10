"""Generic ML inference with learned and oracle proxies on a randomized trial.

With the true CATE as the proxy, the BLP heterogeneity loading beta2 should
be close to one and the GATES should increase across groups. A lasso proxy
fitted on the auxiliary halves is shown alongside.

Run: python3 demos/generic_ml_oracle.py
"""
import numpy as np

from hteml import LearnerSpec, OracleProxy, PropensityModel, generate_dgp, run_generic_ml

sample = generate_dgp("hte_forest", 2000, 5, {"effect": 1}, seed=3)
data = sample.dataset
prop = PropensityModel("constant", np.full(data.n, 0.5))
sources = [OracleProxy(sample.baseline, sample.true_cate),
           LearnerSpec("lasso", {"n_lambdas": 30})]
results = run_generic_ml(data, sources, prop, n_splits=20, level=0.90, seed=0,
                         characteristics=["x1", "x2"])

for res in results:
    print(f"[{res.label}] beta1 {res.beta1.theta:.3f} "
          f"[{res.beta1.ci_low:.3f}, {res.beta1.ci_high:.3f}], "
          f"beta2 {res.beta2.theta:.3f} [{res.beta2.ci_low:.3f}, {res.beta2.ci_high:.3f}]")
    print("    GATES:", " ".join(f"{g.theta:.2f}" for g in res.gammas))
    c = res.clan["x1"]
    print(f"    CLAN x1: most affected {c.mean_most.theta:.2f}, least {c.mean_least.theta:.2f}, "
          f"p = {c.p_diff:.2g}")
    print(f"    lambda_blp {res.lambda_blp:.3f}, lambda_gates {res.lambda_gates:.3f}")
