"""Joint resource-block assignment and power control for mixed eMBB / mMTC / URLLC traffic."""

__version__ = "0.1.0"
