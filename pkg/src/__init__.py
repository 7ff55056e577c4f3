"""
SourceCV: reliability of cross-validation estimates for new data sources.
"""

__version__ = "0.1.0"
