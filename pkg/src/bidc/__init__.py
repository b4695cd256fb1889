"""Four atoms on an interacting coupled-resonator ring: doublon-continuum bound states."""

__version__ = "0.1.0"
