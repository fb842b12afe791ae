"""
Модели данных и сеть LGNet
"""

from .base import DatasetManifest, IRImage, LanguagePrior, Sample, TargetMask

__all__ = [
    'DatasetManifest',
    'IRImage',
    'LanguagePrior',
    'Sample',
    'TargetMask'
]
