"""UAV-assisted multi-task federated learning simulator."""

__version__ = "0.1.0"
