"""latentsde: physics-regularized latent neural SDE forecasting.

Continuous-time encoding of irregular windows, a latent neural SDE trained
with no-arbitrage style regularizers, symbolic distillation into readable
formulas, conformal prediction intervals with a Kelly allocator, and a
synthetic crash-regime limit-order-book dataset generator.
"""

__version__ = "0.1.0"
