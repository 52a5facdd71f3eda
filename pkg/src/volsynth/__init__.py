"""Desk-scale MRI-to-PET volume synthesis with plane-cycled feature losses."""

__version__ = "0.1.0"
