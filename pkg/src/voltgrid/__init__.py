"""Safe multi-station EV charging on a radial feeder: simulator and Lagrangian MAPPO learner."""

__version__ = "0.1.0"
