"""
Certifying a state constraint through the surrogate
===================================================

We ask whether x1 stays below a bound along a controlled Duffing
trajectory, using only the learned surrogate. The surrogate prediction has
to stay below -epsilon; the true trajectory is then checked separately.
"""

import numpy as np

from koopman_certify import (
    CertificationConfig,
    Observable,
    StateDomain,
    assemble_surrogate,
    certify,
    composite_dictionary,
    constraint_coefficients,
    duffing,
    fit_controls,
    monomial_dictionary,
    validate_certificate,
)
from koopman_certify.experiments import admissible_control

system = duffing()
domain = StateDomain([-2, -2], [2, 2])
x0 = np.array([1.0, 1.0])
T = 1.0

# a control whose true trajectory stays inside the sampling box
u, traj, _ = admissible_control(system, x0, T, 1e-3, seed=0, domain=domain)
top = traj.states[:, 0].max()
print(f"true max of x1 on [0, {T}]: {top:.3f}")

# two constraints: one just above the true maximum, one just below it
loose = Observable.from_expression(f"x1 - {top + 0.1:.6f}", 2, "loose")
tight = Observable.from_expression(f"x1 - {top - 0.1:.6f}", 2, "tight")

# adding the constraints to the dictionary makes their coefficients exact
dic = composite_dictionary([loose, tight], monomial_dictionary(2, 5), domain.lower, domain.upper)
s = assemble_surrogate(fit_controls(dic, system, domain, m=10000, seed=3), dic)
coeffs = constraint_coefficients([loose, tight], dic, domain.lower, domain.upper)

cert = certify(s, coeffs, x0, u, CertificationConfig(epsilon=0.05, T=T))
for v in cert.verdicts:
    print(f"{v.label:6s} {v.verdict:9s} worst margin {v.worst_margin: .4f}  first failure {v.first_failure_time}")

truth = validate_certificate(system, x0, u, [loose, tight], T)
print("ground truth satisfied:", truth.satisfied, "| first violation at t =", truth.time, "index", truth.index)

# tightening more aggressively can only turn certified into rejected
for eps in (0.01, 0.05, 0.2, 0.5):
    c = certify(s, coeffs[:1], x0, u, CertificationConfig(eps, T=T))
    print(f"epsilon={eps}: {c.verdicts[0].verdict}")
