"""bottlecheck - Visual inspection of medicine bottles with feature ensembles."""

__version__ = "0.1.0"
