"""physloc: desk-scale text-to-image geo-localization with physical-signature supervision."""

__version__ = "0.1.0"
