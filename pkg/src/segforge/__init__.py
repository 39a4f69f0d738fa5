"""segforge: SE/ASPP/residual U-Net liver segmentation workbench, built from scratch."""

__version__ = "0.1.0"
