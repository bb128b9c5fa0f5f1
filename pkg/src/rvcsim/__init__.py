"""Teleoperated retinal vein cannulation simulator."""

__version__ = "0.1.0"
