"""Broken non-abelian X-ray transform on the Minkowski causal diamond.

Forward scattering of so(n) connections along broken light rays, gauge
actions and light-sink projection, stability-estimate reports, and Bayesian
recovery of light-sink connections from noisy scattering data.
"""

__version__ = "0.1.0"
