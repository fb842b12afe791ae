"""
Оценка обученной сети: метрики IoU, nIoU, Pd, Fa и время инференса
"""

import logging
import time
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from config.settings import LanguageMode, get_settings
from config.storage import read_manifest_split
from models.base import DatasetManifest, Sample, Split
from models.checkpoint import load_checkpoint
from models.embeddings import EmbeddingProvider
from models.lgnet import LGNet, LGNetConfig, lgnet_forward, resize_image
from utils.exceptions import CheckpointError, DatasetError
from utils.metrics import MetricAccumulator, MetricReport, binarize

logger = logging.getLogger(__name__)

Predictor = Callable[[Sample], np.ndarray]


def evaluate_predictor(
    predict: Predictor,
    samples: Sequence[Sample],
    threshold: Optional[float] = None,
    centroid_tol: Optional[float] = None
) -> MetricReport:
    """
    Оценка произвольного предсказателя карт вероятностей

    Args:
        predict: Функция образец -> карта [H, W] в разрешении маски
        samples: Образцы с масками
        threshold: Порог бинаризации
        centroid_tol: Допуск по центроидам

    Returns:
        MetricReport
    """
    settings = get_settings()
    threshold = settings.BINARIZE_THRESHOLD if threshold is None else threshold
    acc = MetricAccumulator(centroid_tol=settings.CENTROID_TOLERANCE if centroid_tol is None else centroid_tol)

    for sample in samples:
        if sample.mask is None:
            raise DatasetError(f"id {sample.id}: mask missing")
        acc.update(binarize(predict(sample), threshold), sample.mask)

    return MetricReport.from_accumulator(acc, threshold)


def model_predictor(model: LGNet, provider: EmbeddingProvider, use_language: bool) -> Predictor:
    """Предсказатель на основе сети: прямой проход и возврат к размеру изображения"""

    @torch.no_grad()
    def predict(sample: Sample) -> np.ndarray:
        td = provider.describe(sample.image, sample.prior if use_language else None)
        prob = lgnet_forward(model, sample.image, td).final
        prob = resize_image(prob[None, None], sample.image.shape[:2])[0, 0]
        return prob.float().cpu().numpy()

    return predict


def evaluate_samples(
    model: LGNet,
    samples: Sequence[Sample],
    provider: EmbeddingProvider,
    use_language: bool,
    threshold: Optional[float] = None,
    centroid_tol: Optional[float] = None
) -> MetricReport:
    """Оценка сети на списке образцов в режиме eval"""
    was_training = model.training
    model.eval()
    try:
        return evaluate_predictor(model_predictor(model, provider, use_language), samples, threshold, centroid_tol)
    finally:
        model.train(was_training)


def _load_for_evaluation(checkpoint: Path, provider: EmbeddingProvider,
                         expected: Optional[LGNetConfig], device: str) -> LGNet:
    model, _ = load_checkpoint(checkpoint, expected=expected, map_location=device)
    if provider.dim != model.config.descriptor_dim:
        raise CheckpointError(
            f"checkpoint/config mismatch: descriptor_dim {model.config.descriptor_dim} "
            f"!= provider dim {provider.dim}"
        )
    return model


def _test_samples(manifest: DatasetManifest) -> Sequence[Sample]:
    if not manifest.test_ids:
        raise DatasetError(f"empty split: {manifest.root} не содержит тестовых образцов")
    return read_manifest_split(manifest, Split.TEST)


def evaluate(
    checkpoint: Path,
    manifest: DatasetManifest,
    provider: EmbeddingProvider,
    language_mode_at_test: LanguageMode = LanguageMode.TRAINING_ONLY,
    threshold: Optional[float] = None,
    centroid_tol: Optional[float] = None,
    expected: Optional[LGNetConfig] = None,
    device: str = "cpu"
) -> MetricReport:
    """
    Оценка чекпоинта на тестовом разбиении

    Args:
        checkpoint: Путь к чекпоинту
        manifest: Манифест набора
        provider: Провайдер эмбеддингов
        language_mode_at_test: training_and_test - текст используется при тесте
        threshold: Порог бинаризации
        centroid_tol: Допуск по центроидам
        expected: Ожидаемая конфигурация сети
        device: Устройство

    Returns:
        MetricReport
    """
    model = _load_for_evaluation(Path(checkpoint), provider, expected, device)
    samples = _test_samples(manifest)
    use_language = LanguageMode(language_mode_at_test) == LanguageMode.TRAINING_AND_TEST

    report = evaluate_samples(model, samples, provider, use_language, threshold, centroid_tol)
    logger.info(
        f"Оценка {checkpoint} ({len(samples)} образцов, текст при тесте: {use_language}): "
        f"IoU {report.iou:.4f}, nIoU {report.niou:.4f}, Pd {report.pd:.4f}, Fa {report.fa:.3e}"
    )
    return report


def evaluate_modes(
    checkpoint: Path,
    manifest: DatasetManifest,
    provider: EmbeddingProvider,
    threshold: Optional[float] = None,
    centroid_tol: Optional[float] = None,
    expected: Optional[LGNetConfig] = None,
    device: str = "cpu"
) -> Dict[str, MetricReport]:
    """
    Оценка одного чекпоинта без текста и с текстом на тесте

    Returns:
        {'training_only': ..., 'training_and_test': ...}
    """
    model = _load_for_evaluation(Path(checkpoint), provider, expected, device)
    samples = _test_samples(manifest)

    results = {}
    for mode in (LanguageMode.TRAINING_ONLY, LanguageMode.TRAINING_AND_TEST):
        use_language = mode == LanguageMode.TRAINING_AND_TEST
        results[mode.value] = evaluate_samples(model, samples, provider, use_language, threshold, centroid_tol)
    return results


def measure_inference_time(
    model: LGNet,
    input_size: Optional[Tuple[int, int]] = None,
    repeats: int = 10,
    warmup: int = 2
) -> float:
    """
    Среднее время прямого прохода одного изображения, мс

    Args:
        model: Сеть
        input_size: Размер входа (по умолчанию из конфигурации сети)
        repeats: Число замеров
        warmup: Число прогревочных проходов

    Returns:
        Миллисекунды на изображение
    """
    if repeats < 1:
        raise ValueError("repeats должно быть >= 1")

    h, w = input_size or model.config.input_size
    param = next(model.parameters())
    image = torch.rand(1, model.config.in_channels, h, w, dtype=param.dtype, device=param.device)
    td = torch.randn(1, model.config.descriptor_dim, dtype=param.dtype, device=param.device)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(image, td)
            started = time.perf_counter()
            for _ in range(repeats):
                model(image, td)
            if param.device.type == 'cuda':
                torch.cuda.synchronize()
            elapsed = time.perf_counter() - started
    finally:
        model.train(was_training)

    return elapsed * 1000.0 / repeats
