"""OLAT-based video relighting toolkit: HDR I/O, light rigs, a ray-traced OLAT
studio, hybrid dataset construction, and a small conditional video diffusion
model with windowed long-sequence inference."""

__version__ = "0.1.0"
