"""
Утилиты LGNet
"""

from .exceptions import LGNetError, ValidationError

__all__ = [
    'LGNetError',
    'ValidationError'
]
