"""Design-based spatial inference for M-estimators on finite populations."""
__version__ = "0.1.0"
