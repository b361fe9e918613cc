"""curvlab: activation curvature, input-Hessian spectra and adversarial training at desk scale."""

from curvlab.activations import ActivationSpec, parse_activation

__version__ = "0.1.0"

__all__ = ["ActivationSpec", "parse_activation", "__version__"]
