"""
robustface - adversarially robust face embeddings trained from scratch
"""

__version__ = "0.1.0"
