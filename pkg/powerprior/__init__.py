"""
Power-prior integration of a probability and a non-probability sample.
"""

__version__ = "1.0.0"
