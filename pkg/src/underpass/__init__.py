"""Desk-scale lab for parameter-halving CNN families and night-to-day CycleGAN transfer."""

__version__ = "0.1.0"
