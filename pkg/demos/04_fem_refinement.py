"""
Hat-function dictionaries and mesh refinement
=============================================

On x' = -x + u (1 - x^2) over [-1, 1] we predict sin(3x), which is not in
any hat-function space, with quadrature-level fits on finer and finer
meshes.
"""

from koopman_certify import ControlSignal, Observable, saturating_1d
from koopman_certify.experiments import FemSweepSpec, run_fem_sweep

spec = FemSweepSpec(
    system=saturating_1d(-1.0, 1.0),
    lower=(-1.0,),
    upper=(1.0,),
    constraints=(Observable.from_expression("x1**2 - 0.81", 1, "h"),),
    observable=Observable.from_expression("sin(3*x1)", 1),
    mesh_sizes=(0.2, 0.1, 0.05, 0.025),
    x0=(0.3,),
    control=ControlSignal.constant([0.5]),
    T=1.0,
)
res = run_fem_sweep(spec)
for dx, err in zip(res.summary["mesh_sizes"], res.summary["quadrature_sup_error"]):
    print(f"dx={dx:<6} sup error {err:.3e}")
print("reduction per halving:", [round(r, 2) for r in res.summary["reduction_factors"]])
print("observed order:", round(res.summary["rate"], 2))
