"""Anatomy-aware shared control for teleoperated ultrasound scanning.

Synthetic torso generation, rib-line projection, forbidden-region virtual
fixtures, a Cartesian impedance follower, and the session tooling that ties
them together.
"""

__version__ = "0.1.0"
