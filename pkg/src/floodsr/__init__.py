"""floodsr: super-resolution of coarse-grid flood-depth maps with
conditional denoising diffusion models, trained on a built-in synthetic
catchment simulator.
"""

__version__ = "0.1.0"
