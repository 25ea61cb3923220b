"""crykit: infant-cry classification toolkit.

Fused acoustic feature extraction, LMU/LSTM sequence classifiers on a small
autodiff core, leakage-safe dataset handling, and calibrated entropy-gated
posterior fusion across domain-specific models.
"""

__version__ = "0.1.0"
