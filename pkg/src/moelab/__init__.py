"""moelab: a desk-scale laboratory for competition-routed sparse
mixture-of-experts layers and for estimation-rate experiments on Gaussian
mixture-of-experts densities.

Everything runs on float64 numpy through a small reverse-mode tape
(:mod:`moelab.autodiff`); no GPU framework is involved, so every number in
the test suite is reproducible bit-for-bit from seeds.
"""

__version__ = "0.1.0"
