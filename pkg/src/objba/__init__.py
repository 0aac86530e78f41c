"""Bundle adjustment with moving rigid objects."""
__version__ = "0.1.0"
