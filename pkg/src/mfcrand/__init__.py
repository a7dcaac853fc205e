"""Control randomisation for mean-field control with common noise on finite scenario trees."""

__version__ = "0.1.0"
