"""Kinematic PSM reach/pick environments with a DDPG + HER + BC learner."""
__version__ = "0.1.0"
