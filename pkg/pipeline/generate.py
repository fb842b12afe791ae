"""
Пакетная генерация описаний целей для набора LangIR
"""

import logging
import threading
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

from config.storage import LangIRStorage
from models.base import DatasetManifest, PromptStyle, Split
from utils.validators import validate_description
from utils.vlm_client import BatchResult, VLMClient, build_prompt, request_batch

logger = logging.getLogger(__name__)


@dataclass
class GenerationSummary:
    """Итоги пакетной генерации"""

    requested: int = 0
    written: int = 0
    refused: int = 0
    failed: int = 0
    flagged: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _target_ids(manifest: DatasetManifest, split: Optional[Split]) -> List[str]:
    if split is not None:
        return manifest.ids_for(split)
    return manifest.train_ids + manifest.test_ids


def generate_descriptions(
    manifest: DatasetManifest,
    client: VLMClient,
    style: PromptStyle = PromptStyle.SYSTEM,
    max_words: Optional[int] = 50,
    max_in_flight: Optional[int] = None,
    few_shot_examples: Optional[Sequence[Tuple[bytes, str]]] = None,
    split: Optional[Split] = None,
    overwrite: bool = True
) -> GenerationSummary:
    """
    Генерация и запись описаний для всех образцов манифеста.
    Отказы не записываются; описания с нарушениями записываются и учитываются как flagged.

    Args:
        manifest: Манифест набора
        client: Клиент VLM
        style: Стиль запроса
        max_words: Лимит слов
        max_in_flight: Максимум одновременных запросов
        few_shot_examples: Примеры для few_shot
        split: Только одно разбиение
        overwrite: Перезаписывать существующие описания

    Returns:
        GenerationSummary
    """
    storage = LangIRStorage(manifest.root, manifest.subset)
    summary = GenerationSummary()
    lock = threading.Lock()

    payloads = []
    for sample_id in _target_ids(manifest, split):
        if not overwrite and storage.description_path(sample_id).is_file():
            continue
        image_bytes = storage.image_path(sample_id).read_bytes()
        payloads.append((sample_id, build_prompt(image_bytes, style, max_words, few_shot_examples)))
    summary.requested = len(payloads)

    def on_result(result: BatchResult):
        if result.error is not None:
            with lock:
                summary.failed += 1
            return
        if result.response.refused:
            with lock:
                summary.refused += 1
            return

        report = validate_description(result.response.text, max_words)
        storage.write_description(result.key, result.response.text)
        with lock:
            summary.written += 1
            if not report.is_valid:
                summary.flagged += 1
        if not report.is_valid:
            logger.warning(f"Описание {result.key}: {'; '.join(report.issues)}")

    request_batch(
        client, payloads,
        max_in_flight=max_in_flight,
        rate_limit_per_minute=client.config.rate_limit_per_minute,
        on_result=on_result,
    )

    logger.info(
        f"Генерация описаний: запрошено {summary.requested}, записано {summary.written}, "
        f"отказов {summary.refused}, ошибок {summary.failed}, с замечаниями {summary.flagged}"
    )
    return summary
