__version__ = "0.1.0"
BUILD_ID = f"rsdistill {__version__} (float64 numpy engine, checkpoint format v1)"
