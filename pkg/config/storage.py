"""
Хранилище набора данных в формате LangIR: изображения, маски, описания, разбиения
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from models.base import DatasetManifest, DatasetSubset, IRImage, LanguagePrior, PriorSource, Sample, Split, TargetMask
from utils.exceptions import DatasetError
from utils.helpers import png_bytes, read_png

logger = logging.getLogger(__name__)

SPLIT_FILES = {
    Split.TRAIN: "trainval.txt",
    Split.TEST: "test.txt",
}

IMAGES_DIR = "images"
MASKS_DIR = "masks"
DESCRIPTIONS_DIR = "descriptions"


@dataclass(frozen=True)
class LangIRLayout:
    """Шаблоны имен файлов подмножества"""

    subset: DatasetSubset
    image_name_template: str
    mask_name_template: str
    description_name_template: str

    def image_name(self, sample_id: str) -> str:
        return self.image_name_template.format(id=sample_id)

    def mask_name(self, sample_id: str) -> str:
        return self.mask_name_template.format(id=sample_id)

    def description_name(self, sample_id: str) -> str:
        return self.description_name_template.format(id=sample_id)

    def id_from_image_name(self, name: str) -> Optional[str]:
        """Обратное преобразование имени изображения в id; None, если имя не по шаблону"""
        prefix, suffix = self.image_name_template.split("{id}")
        if name.startswith(prefix) and name.endswith(suffix) and len(name) > len(prefix) + len(suffix):
            return name[len(prefix):len(name) - len(suffix)]
        return None


LAYOUTS: Dict[DatasetSubset, LangIRLayout] = {
    DatasetSubset.LANGIR_IRSTD: LangIRLayout(
        subset=DatasetSubset.LANGIR_IRSTD,
        image_name_template="XDU{id}.png",
        mask_name_template="XDU{id}.png",
        description_name_template="XDU{id}_description.txt",
    ),
    DatasetSubset.LANGIR_SIRST: LangIRLayout(
        subset=DatasetSubset.LANGIR_SIRST,
        image_name_template="Misc_{id}.png",
        mask_name_template="Misc_{id}_pixels0.png",
        description_name_template="Misc_{id}_description.txt",
    ),
}
# Синтетический набор пишется по соглашению IRSTD-1k
LAYOUTS[DatasetSubset.SYNTHETIC] = LangIRLayout(
    subset=DatasetSubset.SYNTHETIC,
    image_name_template=LAYOUTS[DatasetSubset.LANGIR_IRSTD].image_name_template,
    mask_name_template=LAYOUTS[DatasetSubset.LANGIR_IRSTD].mask_name_template,
    description_name_template=LAYOUTS[DatasetSubset.LANGIR_IRSTD].description_name_template,
)


def get_layout(subset: Union[DatasetSubset, str]) -> LangIRLayout:
    """
    Шаблоны имен для подмножества

    Args:
        subset: langir_irstd, langir_sirst или synthetic

    Returns:
        LangIRLayout
    """
    try:
        return LAYOUTS[DatasetSubset(subset)]
    except ValueError as e:
        known = ", ".join(s.value for s in DatasetSubset)
        raise DatasetError(f"unknown subset: {subset!r} (известные: {known})") from e


class LangIRStorage:
    """Менеджер каталога LangIR"""

    def __init__(self, root: Union[str, Path], layout: Union[LangIRLayout, DatasetSubset, str]):
        """
        Args:
            root: Корневой каталог набора
            layout: Шаблоны имен или название подмножества
        """
        self.root = Path(root)
        self.layout = layout if isinstance(layout, LangIRLayout) else get_layout(layout)

    def image_path(self, sample_id: str) -> Path:
        return self.root / IMAGES_DIR / self.layout.image_name(sample_id)

    def mask_path(self, sample_id: str) -> Path:
        return self.root / MASKS_DIR / self.layout.mask_name(sample_id)

    def description_path(self, sample_id: str) -> Path:
        return self.root / DESCRIPTIONS_DIR / self.layout.description_name(sample_id)

    def split_path(self, split: Split) -> Path:
        return self.root / SPLIT_FILES[Split(split)]

    def _ensure_directories(self):
        for name in (IMAGES_DIR, MASKS_DIR, DESCRIPTIONS_DIR):
            (self.root / name).mkdir(parents=True, exist_ok=True)

    # ============== ЗАПИСЬ ==============

    def write_sample(self, sample: Sample):
        """Запись изображения, маски и описания одного образца"""
        self._ensure_directories()
        self.image_path(sample.id).write_bytes(png_bytes(sample.image.pixels))
        if sample.mask is not None:
            self.mask_path(sample.id).write_bytes(png_bytes(sample.mask.pixels, binary=True))
        if sample.prior is not None:
            self.write_description(sample.id, sample.prior.text)

    def write_description(self, sample_id: str, text: str) -> Path:
        """Запись (или замена) текстового описания"""
        path = self.description_path(sample_id)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(text.encode('utf-8'))
        return path

    def write_split(self, split: Split, ids: Sequence[str]):
        self.root.mkdir(parents=True, exist_ok=True)
        content = "".join(f"{sample_id}\n" for sample_id in ids)
        self.split_path(split).write_text(content, encoding='utf-8')

    # ============== ЧТЕНИЕ ==============

    def read_split(self, split: Split) -> List[str]:
        path = self.split_path(split)
        if not path.is_file():
            raise DatasetError(f"split file not found: {path}")
        lines = path.read_text(encoding='utf-8').splitlines()
        return [line.strip() for line in lines if line.strip()]

    def missing_files(self, sample_id: str) -> List[str]:
        """Имена обязательных файлов образца, которых нет на диске"""
        missing = []
        if not self.image_path(sample_id).is_file():
            missing.append(f"{IMAGES_DIR}/{self.layout.image_name(sample_id)}")
        if not self.mask_path(sample_id).is_file():
            missing.append(f"{MASKS_DIR}/{self.layout.mask_name(sample_id)}")
        return missing

    def read_description(self, sample_id: str) -> Optional[str]:
        path = self.description_path(sample_id)
        if not path.is_file():
            return None
        return path.read_bytes().decode('utf-8')

    def read_sample(self, sample_id: str, split: Split = Split.TRAIN,
                    source: PriorSource = PriorSource.VLM) -> Sample:
        """
        Чтение одного образца; описание необязательно

        Args:
            sample_id: Идентификатор
            split: Разбиение, к которому относится образец
            source: Источник, приписываемый прочитанному описанию

        Returns:
            Sample
        """
        missing = self.missing_files(sample_id)
        if missing:
            raise DatasetError(f"id {sample_id}: missing {', '.join(missing)}")

        image = IRImage(read_png(str(self.image_path(sample_id))), sample_id)
        mask = TargetMask(read_png(str(self.mask_path(sample_id)), binary=True))
        if mask.shape != image.shape:
            raise DatasetError(
                f"id {sample_id}: shape mismatch: image {image.shape}, mask {mask.shape}"
            )

        text = self.read_description(sample_id)
        prior = LanguagePrior.from_text(text, source=source) if text is not None else None
        return Sample(image=image, mask=mask, prior=prior, split=split)


def write_langir(root: Union[str, Path], layout: Union[LangIRLayout, DatasetSubset, str],
                 samples: Iterable[Sample]) -> DatasetManifest:
    """
    Запись образцов в каталог LangIR

    Args:
        root: Корневой каталог
        layout: Шаблоны имен или подмножество
        samples: Образцы (split определяет файл разбиения)

    Returns:
        DatasetManifest
    """
    storage = LangIRStorage(root, layout)
    samples = list(samples)

    seen, duplicates = set(), []
    for sample in samples:
        if sample.id in seen:
            duplicates.append(sample.id)
        seen.add(sample.id)
    if duplicates:
        raise DatasetError(f"duplicate ids: {', '.join(sorted(set(duplicates)))}")

    for sample in samples:
        storage.write_sample(sample)

    train_ids = [s.id for s in samples if s.split == Split.TRAIN]
    test_ids = [s.id for s in samples if s.split == Split.TEST]
    storage.write_split(Split.TRAIN, train_ids)
    storage.write_split(Split.TEST, test_ids)

    logger.info(
        f"Набор записан в {storage.root}: {len(train_ids)} train, {len(test_ids)} test "
        f"({storage.layout.subset.value})"
    )
    return DatasetManifest(
        root_path=str(storage.root),
        subset=storage.layout.subset,
        train_ids=train_ids,
        test_ids=test_ids,
    )


def read_langir(root: Union[str, Path], layout: Union[LangIRLayout, DatasetSubset, str],
                split: Optional[Split] = None) -> List[Sample]:
    """
    Чтение образцов из каталога LangIR

    Args:
        root: Корневой каталог
        layout: Шаблоны имен или подмножество
        split: Одно разбиение или None для обоих (сначала train)

    Returns:
        Список Sample в порядке файлов разбиений
    """
    storage = LangIRStorage(root, layout)
    splits = [Split(split)] if split is not None else [Split.TRAIN, Split.TEST]
    samples = []
    for current in splits:
        for sample_id in storage.read_split(current):
            samples.append(storage.read_sample(sample_id, current))
    return samples


def detect_subset(root: Union[str, Path]) -> DatasetSubset:
    """Подмножество по именам файлов в images/"""
    images = Path(root) / IMAGES_DIR
    if not images.is_dir():
        raise DatasetError(f"not a LangIR directory: {images} not found")
    names = [p.name for p in images.iterdir() if p.suffix == ".png"]
    if any(LAYOUTS[DatasetSubset.LANGIR_SIRST].id_from_image_name(n) is not None for n in names):
        return DatasetSubset.LANGIR_SIRST
    return DatasetSubset.LANGIR_IRSTD


def load_manifest(root: Union[str, Path],
                  subset: Optional[Union[DatasetSubset, str]] = None) -> DatasetManifest:
    """
    Манифест существующего каталога с проверкой наличия файлов

    Args:
        root: Корневой каталог
        subset: Подмножество; None - определить по именам файлов

    Returns:
        DatasetManifest
    """
    subset = detect_subset(root) if subset is None else subset
    storage = LangIRStorage(root, subset)
    train_ids = storage.read_split(Split.TRAIN)
    test_ids = storage.read_split(Split.TEST)

    problems = []
    for sample_id in train_ids + test_ids:
        for name in storage.missing_files(sample_id):
            problems.append(f"id {sample_id}: {name}")
    if problems:
        raise DatasetError("missing files: " + "; ".join(problems))

    return DatasetManifest(
        root_path=str(storage.root),
        subset=storage.layout.subset,
        train_ids=train_ids,
        test_ids=test_ids,
    )


def read_manifest_split(manifest: DatasetManifest, split: Split) -> List[Sample]:
    """Образцы одного разбиения манифеста"""
    storage = LangIRStorage(manifest.root, manifest.subset)
    return [storage.read_sample(sample_id, split) for sample_id in manifest.ids_for(split)]
