"""Retargeting, hand-mapping and recording toolkit for humanoid dexterous teleoperation."""

__version__ = "0.1.0"
