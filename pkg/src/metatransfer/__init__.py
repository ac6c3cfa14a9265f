"""Early student-failure prediction that transfers across MOOCs using course meta information."""

__version__ = "0.1.0"
