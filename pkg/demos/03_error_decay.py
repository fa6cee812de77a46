"""
How fast does the generator estimate converge?
==============================================

Frobenius distance between empirical generator matrices and a
quadrature-computed Galerkin reference, for growing sample sizes. The
fitted log-log slope should sit near -1/2.
"""

import numpy as np

from koopman_certify import StateDomain, duffing, monomial_dictionary
from koopman_certify.experiments import SweepSpec, run_generator_sweep
from koopman_certify.scenario import Scenario

sc = Scenario(duffing(), StateDomain([-2, -2], [2, 2]), monomial_dictionary(2, 3), np.array([1.0, 1.0]))
res = run_generator_sweep(SweepSpec(sc, (100, 1000, 10000), trials=20, seed=0, epsilons=(1.0, 2.0)))

med = res.summary["medians"]
for i, m in enumerate(res.summary["m_values"]):
    print(f"m={m:6d}  median error u=0: {med['err_u0'][i]:.2e}   u=e1: {med['err_e1'][i]:.3f}")
print("slope (u=e1):", round(res.summary["slopes"]["err_e1"], 3))

# with u = 0 the Duffing field (alpha = -1) is linear, cubics map to cubics,
# and the estimate is exact up to roundoff for any m >= N

for p in res.summary["probabilities"]:
    if p["quantity"] == "err_max":
        print(f"m={p['m']:6d} eps={p['epsilon']}: P(err <= eps) ~ {p['p_hat']:.2f}"
              f"  [{p['wilson_low']:.2f}, {p['wilson_high']:.2f}]")
