"""Learning numeric-facet range partitions from click logs."""

__version__ = "0.1.0"
