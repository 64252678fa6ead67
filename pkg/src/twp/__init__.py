"""Three-Way Ping: RTT and one-way delay measurement, simulation and analysis."""

__version__ = "0.1.0"
