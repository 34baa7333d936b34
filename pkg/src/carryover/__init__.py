"""Future value of carryover storage in cascaded hydropower systems."""

__version__ = "0.1"
