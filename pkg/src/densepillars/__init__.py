"""Pillar-based 3D object detection kit with a dense-connectivity backbone,
analytic cost reporting, and a desk-scale synthetic training harness."""

__version__ = "0.1.0"
