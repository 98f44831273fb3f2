"""Learning-based nonlinear H-infinity control with game-theoretic DDP."""
__version__ = "0.1.0"
