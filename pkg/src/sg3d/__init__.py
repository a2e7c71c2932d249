"""3D semantic scene graph estimation with statistical confidence rescoring."""

__version__ = "0.1.0"
