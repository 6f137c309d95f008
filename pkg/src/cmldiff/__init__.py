"""Energy-conserving coupled map lattices: simulation, random-walk environments and RG flow."""

__version__ = "0.1.0"
