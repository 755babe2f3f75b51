"""Deployments vs samples: greedy and lazy methods.

Switching the sampling distribution (deploying a new decision) is often far
more expensive than drawing another sample from the current one.  Greedy
methods deploy every iteration, so deployments equal samples.  Lazy stagewise
methods freeze the distribution for a block of inner steps and deploy once
per stage; wrapped in a restart driver their deployment count grows only
logarithmically in 1/eps.
"""

from ddopt import closed_form_equilibrium, quad1d, run_wrapped

prob = quad1d(gamma=0.3, m0=1.0, sigma=1.0)
x_bar = closed_form_equilibrium(prob).x_bar

print(f"{'eps':>8} | {'greedy sg deploys':>18} | {'stage-mba-ii deploys':>20} | {'stage-asg deploys':>18}")
for eps in (1e-1, 1e-2, 1e-3):
    greedy = run_wrapped(prob, "sg", "restart-geo", eps, [0.0], seed=3, metric="gap", x_bar=x_bar)
    lazy1 = run_wrapped(prob, "stage-mba-ii", "restart-geo", eps, [0.0], seed=3, metric="gap", x_bar=x_bar)
    lazy2 = run_wrapped(prob, "stage-asg", "restart-minibatch", eps, [0.0], seed=3, metric="gap", x_bar=x_bar)
    assert greedy.total_deployments == greedy.total_samples
    print(f"{eps:>8g} | {greedy.total_deployments:>18} | {lazy1.total_deployments:>20} | {lazy2.total_deployments:>18}")

print("\ngreedy deployments scale like 1/eps (they equal samples);")
print("lazy deployments grow by a constant per halving of eps.")
