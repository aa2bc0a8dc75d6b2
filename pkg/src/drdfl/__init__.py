"""Ring-topology decentralized federated learning with a shared Learngene
encoder and per-class Gaussian statistics, on a small numpy autodiff engine."""

__version__ = "0.1.0"
