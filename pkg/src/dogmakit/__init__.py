"""Dynamic occupancy grid maps: simulation, particle-filter fusion, automatic labelling,
anchor-based box encoding, a balanced training loss and evaluation metrics."""

__version__ = "0.1.0"
