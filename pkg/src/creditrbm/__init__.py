"""Credit portfolio risk with binary Restricted Boltzmann Machines."""

__version__ = "0.1.0"
