"""stadlab: fast probability-flow-ODE likelihoods.

Library layout:

- ``trace``     randomized / exact trace estimation over matvec operators
- ``net``       small MLPs with analytic forward, Jacobian, JVP and
                parameter gradients (including the second-order pattern the
                distillation loss needs), optimizers, checkpoints
- ``dynamics``  noising schedules, score identities, PF-ODE drift assembly
- ``targets``   analytic target densities and synthetic datasets
- ``train``     teacher training (score matching, flow matching) and the
                direct divergence-regression baselines
- ``stad``      Stein baseline/residual, cutoff regularizer, cached
                distillation loop, importance time sampling
- ``odelik``    adaptive ODE likelihood integration with pluggable
                divergence backends, bits-per-dimension conversion
- ``cli``       reproducible experiment drivers (also ``python -m stadlab.cli``)
"""

from . import dynamics, net, odelik, stad, targets, trace, train  # noqa: F401

__version__ = "0.1.0"
