"""Data-free universal adversarial perturbations via singular vector alignment."""

__version__ = "0.1.0"
