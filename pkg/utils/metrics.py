"""
Метрики IRSTD: IoU, nIoU, Pd, Fa
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from skimage import measure

from config.settings import get_settings
from models.base import TargetMask
from utils.exceptions import ShapeError

logger = logging.getLogger(__name__)

MaskLike = Union[TargetMask, np.ndarray]


def _as_bool(mask: MaskLike) -> np.ndarray:
    pixels = mask.pixels if isinstance(mask, TargetMask) else np.asarray(mask)
    return pixels.astype(bool)


def binarize(prob_map, threshold: Optional[float] = None) -> TargetMask:
    """
    Бинаризация карты вероятностей: пиксель = 1 iff prob > threshold

    Args:
        prob_map: Карта [H, W] (numpy или torch)
        threshold: Порог (по умолчанию 0.5)

    Returns:
        TargetMask
    """
    threshold = get_settings().BINARIZE_THRESHOLD if threshold is None else threshold
    if hasattr(prob_map, 'detach'):
        prob_map = prob_map.detach().cpu().numpy()
    return TargetMask((np.asarray(prob_map) > threshold).astype(np.uint8))


@dataclass
class ComponentMatch:
    """Связные компоненты предсказания и разметки и их сопоставление"""

    pred_components: List[np.ndarray] = field(default_factory=list)
    gt_components: List[np.ndarray] = field(default_factory=list)
    matches: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def matched_pred(self) -> set:
        return {p for p, _ in self.matches}

    @property
    def matched_gt(self) -> set:
        return {g for _, g in self.matches}


def _components(mask: np.ndarray, connectivity: int) -> List[np.ndarray]:
    """Координаты пикселей каждой связной компоненты, массивы [N, 2] (row, col)"""
    labels = measure.label(mask, connectivity=connectivity, background=0)
    return [region.coords for region in measure.regionprops(labels)]


def match_components(pred: MaskLike, gt: MaskLike, centroid_tol: Optional[float] = None,
                     connectivity: Optional[int] = None) -> ComponentMatch:
    """
    Взаимно-однозначное сопоставление компонент. Пара допустима, если компоненты
    пересекаются хотя бы одним пикселем или центроиды ближе centroid_tol.
    Жадный выбор по возрастанию расстояния между центроидами.

    Args:
        pred: Предсказанная маска
        gt: Маска разметки
        centroid_tol: Допуск по центроидам в пикселях
        connectivity: 2 для 8-связности

    Returns:
        ComponentMatch
    """
    settings = get_settings()
    centroid_tol = settings.CENTROID_TOLERANCE if centroid_tol is None else centroid_tol
    connectivity = connectivity or settings.COMPONENT_CONNECTIVITY

    pred_mask, gt_mask = _as_bool(pred), _as_bool(gt)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"shape mismatch: pred {pred_mask.shape}, gt {gt_mask.shape}")

    pred_comps = _components(pred_mask, connectivity)
    gt_comps = _components(gt_mask, connectivity)

    gt_labels = np.full(gt_mask.shape, -1, dtype=np.int64)
    for g, coords in enumerate(gt_comps):
        gt_labels[coords[:, 0], coords[:, 1]] = g

    pred_centroids = [c.mean(axis=0) for c in pred_comps]
    gt_centroids = [c.mean(axis=0) for c in gt_comps]

    candidates = []
    for p, coords in enumerate(pred_comps):
        overlapping = set(gt_labels[coords[:, 0], coords[:, 1]].tolist()) - {-1}
        for g in range(len(gt_comps)):
            dist = float(np.linalg.norm(pred_centroids[p] - gt_centroids[g]))
            if g in overlapping or dist <= centroid_tol:
                candidates.append((dist, p, g))

    candidates.sort()
    used_pred, used_gt, matches = set(), set(), []
    for _, p, g in candidates:
        if p in used_pred or g in used_gt:
            continue
        used_pred.add(p)
        used_gt.add(g)
        matches.append((p, g))

    return ComponentMatch(pred_components=pred_comps, gt_components=gt_comps, matches=matches)


@dataclass
class MetricAccumulator:
    """
    Накопитель счетчиков по изображениям.
    T - пиксели предсказания, P - пиксели разметки (формула симметрична).
    """

    tp: List[int] = field(default_factory=list)
    t: List[int] = field(default_factory=list)
    p: List[int] = field(default_factory=list)
    n_pred: List[int] = field(default_factory=list)
    n_all: List[int] = field(default_factory=list)
    p_false: List[int] = field(default_factory=list)
    p_all: List[int] = field(default_factory=list)
    centroid_tol: float = field(default_factory=lambda: get_settings().CENTROID_TOLERANCE)

    @property
    def n(self) -> int:
        return len(self.tp)

    def update(self, pred: MaskLike, gt: MaskLike) -> 'MetricAccumulator':
        """
        Добавление одного изображения

        Args:
            pred: Бинарное предсказание
            gt: Разметка

        Returns:
            self
        """
        pred_mask, gt_mask = _as_bool(pred), _as_bool(gt)
        if pred_mask.shape != gt_mask.shape:
            raise ShapeError(f"shape mismatch: pred {pred_mask.shape}, gt {gt_mask.shape}")

        match = match_components(pred_mask, gt_mask, self.centroid_tol)
        matched_pred = match.matched_pred
        false_pixels = sum(
            len(coords) for i, coords in enumerate(match.pred_components) if i not in matched_pred
        )

        self.tp.append(int(np.logical_and(pred_mask, gt_mask).sum()))
        self.t.append(int(pred_mask.sum()))
        self.p.append(int(gt_mask.sum()))
        self.n_pred.append(len(match.matches))
        self.n_all.append(len(match.gt_components))
        self.p_false.append(int(false_pixels))
        self.p_all.append(int(pred_mask.size))
        return self

    def merge(self, other: 'MetricAccumulator') -> 'MetricAccumulator':
        """Объединение накопителей конкатенацией"""
        return MetricAccumulator(
            tp=self.tp + other.tp, t=self.t + other.t, p=self.p + other.p,
            n_pred=self.n_pred + other.n_pred, n_all=self.n_all + other.n_all,
            p_false=self.p_false + other.p_false, p_all=self.p_all + other.p_all,
            centroid_tol=self.centroid_tol,
        )

    def check_invariants(self) -> bool:
        lists = (self.tp, self.t, self.p, self.n_pred, self.n_all, self.p_false, self.p_all)
        if len({len(values) for values in lists}) != 1:
            return False
        for i in range(self.n):
            if self.tp[i] > min(self.t[i], self.p[i]) or self.n_pred[i] > self.n_all[i]:
                return False
            if self.p_false[i] > self.p_all[i]:
                return False
        return True


def _require_images(acc: MetricAccumulator):
    if acc.n < 1:
        raise ValueError("накопитель пуст: нужно хотя бы одно изображение")


def iou(acc: MetricAccumulator) -> float:
    """IoU по всему набору: сумма TP / сумма объединений"""
    _require_images(acc)
    inter = sum(acc.tp)
    union = sum(t + p - tp for tp, t, p in zip(acc.tp, acc.t, acc.p))
    if union == 0:
        return 1.0
    return inter / union


def niou(acc: MetricAccumulator) -> float:
    """Среднее по изображениям IoU; пара пустых масок дает 1"""
    _require_images(acc)
    values = []
    for tp, t, p in zip(acc.tp, acc.t, acc.p):
        union = t + p - tp
        values.append(1.0 if union == 0 else tp / union)
    return sum(values) / len(values)


def pd(acc: MetricAccumulator) -> float:
    """Доля найденных целей, усредненная по изображениям с целями"""
    _require_images(acc)
    ratios = []
    skipped = 0
    for n_pred, n_all in zip(acc.n_pred, acc.n_all):
        if n_all == 0:
            skipped += 1
            continue
        ratios.append(n_pred / n_all)
    if skipped:
        logger.warning(f"Pd: {skipped} изображений без целей исключены из усреднения")
    if not ratios:
        return 1.0
    return sum(ratios) / len(ratios)


def fa(acc: MetricAccumulator) -> float:
    """Доля ложных пикселей (несопоставленные компоненты) от всех пикселей, среднее по изображениям"""
    _require_images(acc)
    return sum(f / a for f, a in zip(acc.p_false, acc.p_all)) / acc.n


@dataclass
class MetricReport:
    """Итог оценки"""

    iou: float
    niou: float
    pd: float
    fa: float
    n: int
    threshold: float
    centroid_tol: float

    @classmethod
    def from_accumulator(cls, acc: MetricAccumulator, threshold: Optional[float] = None) -> 'MetricReport':
        threshold = get_settings().BINARIZE_THRESHOLD if threshold is None else threshold
        return cls(
            iou=iou(acc), niou=niou(acc), pd=pd(acc), fa=fa(acc),
            n=acc.n, threshold=float(threshold), centroid_tol=float(acc.centroid_tol),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> 'MetricReport':
        return cls(**{key: data[key] for key in cls.__dataclass_fields__})
