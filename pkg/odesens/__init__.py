"""odesens: ODE solution and QoI sensitivities to perturbed component functions."""

__version__ = "0.1.0"
