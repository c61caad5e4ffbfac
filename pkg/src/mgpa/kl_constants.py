# Sparse-code KL approximation constants (log-uniform prior, variational dropout
# posterior). Validated against a Monte Carlo estimate in tests/test_elbo.py.
K1 = 0.63576
K2 = 1.87320
K3 = 1.48695

# Added to mu**2 before taking logs so log(alpha) stays finite at mu == 0.
MU2_FLOOR = 1e-30
