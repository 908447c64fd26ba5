"""Graph-network solver for mixed-boundary Poisson problems on unstructured meshes."""

__version__ = "0.1.0"
