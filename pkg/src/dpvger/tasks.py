"""MNIST ingestion and the Split-MNIST task stream.

Private training rows are only reachable through ``TaskDataset`` accessors.
``TaskStream.retire`` overwrites them with zeros and poisons the handle; test
splits and the public carve-out stay readable.
"""

from __future__ import annotations

import gzip
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dpvger.config import DEFAULT_TASK_PAIRS, TaskConfig
from dpvger.errors import DataError, DataErrorCode
from dpvger.logger import logger
from dpvger.rng import RngState

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES: Dict[str, Tuple[str, str]] = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class RawDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.ndim != 2 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.images.shape[0]} images for {self.labels.shape[0]} labels",
                code=DataErrorCode.COUNT_MISMATCH,
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.images.shape[1])

    def counts(self) -> Dict[int, int]:
        digits, counts = np.unique(self.labels, return_counts=True)
        return {int(d): int(c) for d, c in zip(digits, counts)}


@dataclass
class LabeledRows:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise DataError(f"missing data file {path}", code=DataErrorCode.MISSING_FILE)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as handle:
            return handle.read()
    return path.read_bytes()


def _header(data: bytes, words: int, source: str) -> List[int]:
    if len(data) < 4 * words:
        raise DataError(
            f"{source}: header needs {4 * words} bytes, file has {len(data)}",
            code=DataErrorCode.TRUNCATED,
        )
    return [int.from_bytes(data[4 * i : 4 * i + 4], "big") for i in range(words)]


def parse_idx_images(data: bytes, source: str = "<images>") -> np.ndarray:
    magic = _header(data, 1, source)[0]
    if magic != IMAGE_MAGIC:
        raise DataError(
            f"{source}: magic 0x{magic:08x} is not an IDX image file "
            f"(0x{IMAGE_MAGIC:08x})",
            code=DataErrorCode.BAD_MAGIC,
        )
    _, count, rows, cols = _header(data, 4, source)
    size = count * rows * cols
    payload = data[16:]
    if len(payload) < size:
        raise DataError(
            f"{source}: expected {size} pixel bytes, found {len(payload)}",
            code=DataErrorCode.TRUNCATED,
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=size)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes, source: str = "<labels>") -> np.ndarray:
    magic = _header(data, 1, source)[0]
    if magic != LABEL_MAGIC:
        raise DataError(
            f"{source}: magic 0x{magic:08x} is not an IDX label file "
            f"(0x{LABEL_MAGIC:08x})",
            code=DataErrorCode.BAD_MAGIC,
        )
    _, count = _header(data, 2, source)
    payload = data[8:]
    if len(payload) < count:
        raise DataError(
            f"{source}: expected {count} labels, found {len(payload)}",
            code=DataErrorCode.TRUNCATED,
        )
    labels = np.frombuffer(payload, dtype=np.uint8, count=count).astype(np.int64)
    if np.any(labels > 9):
        raise DataError(f"{source}: label outside 0-9")
    return labels


def load_idx(images_path: str | Path, labels_path: str | Path) -> RawDataset:
    """Parse a big-endian IDX image/label file pair (raw or gzip)."""
    images_path = Path(images_path)
    labels_path = Path(labels_path)
    images = parse_idx_images(_read_bytes(images_path), str(images_path))
    labels = parse_idx_labels(_read_bytes(labels_path), str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels",
            code=DataErrorCode.COUNT_MISMATCH,
        )
    return RawDataset(images=images, labels=labels)


def _resolve(data_dir: Path, name: str) -> Path:
    raw = data_dir / name
    if raw.exists():
        return raw
    gz = data_dir / f"{name}.gz"
    return gz if gz.exists() else raw


def load_mnist(data_dir: str | Path, split: str) -> RawDataset:
    if split not in MNIST_FILES:
        raise DataError(f"unknown MNIST split {split!r}")
    directory = Path(data_dir)
    images_name, labels_name = MNIST_FILES[split]
    return load_idx(_resolve(directory, images_name), _resolve(directory, labels_name))


def downscale(images: np.ndarray, factor: int = 2) -> np.ndarray:
    """Non-overlapping ``factor x factor`` average pooling of square images.

    Each block is summed row-major, then divided by ``factor**2``.
    """
    if factor < 1:
        raise DataError(f"pooling factor must be >= 1, got {factor}")
    side = math.isqrt(images.shape[1])
    if side * side != images.shape[1] or side % factor != 0:
        raise DataError(
            f"image side {side} (width {images.shape[1]}) is not divisible "
            f"by factor {factor}",
            code=DataErrorCode.INDIVISIBLE_SIDE,
        )
    if factor == 1:
        return images.copy()
    out_side = side // factor
    blocks = images.reshape(images.shape[0], out_side, factor, out_side, factor)
    total = np.zeros((images.shape[0], out_side, out_side))
    for di in range(factor):
        for dj in range(factor):
            total = total + blocks[:, :, di, :, dj]
    return (total / float(factor * factor)).reshape(images.shape[0], -1)


def cap_per_class(raw: RawDataset, cap: Optional[int]) -> RawDataset:
    """Keep the first ``cap`` rows of every digit, in original order."""
    if cap is None:
        return raw
    keep = np.zeros(len(raw), dtype=bool)
    for digit in np.unique(raw.labels):
        rows = np.flatnonzero(raw.labels == digit)[:cap]
        keep[rows] = True
    return RawDataset(images=raw.images[keep], labels=raw.labels[keep])


@dataclass(eq=False)
class TaskDataset:
    """One binary task. Private train rows are guarded; test and public are not."""

    task_id: int
    pair: Tuple[int, int]
    test: LabeledRows
    _train_images: np.ndarray
    _train_labels: np.ndarray
    public: Optional[LabeledRows] = None
    public_mask: Optional[np.ndarray] = None
    read_count: int = 0
    retired: bool = field(default=False, init=False)

    def __post_init__(self) -> None:
        for rows in (self._train_labels, self.test.labels):
            if not np.all(np.isin(rows, self.pair)):
                raise DataError(
                    f"task {self.task_id} holds labels outside {self.pair}",
                    code=DataErrorCode.DATA_ERROR,
                )

    def _guard(self) -> None:
        if self.retired:
            raise DataError(
                f"task {self.task_id} private data was retired",
                code=DataErrorCode.ACCESS_AFTER_RETIRE,
            )
        self.read_count += 1

    @property
    def num_train(self) -> int:
        return int(self._train_labels.shape[0])

    def train_images(self) -> np.ndarray:
        self._guard()
        return self._train_images

    def train_labels(self) -> np.ndarray:
        self._guard()
        return self._train_labels

    def rows_for_class(self, label: int) -> np.ndarray:
        """Private rows of one digit only."""
        self._guard()
        return self._train_images[self._train_labels == label]

    def real_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        """Private rows and the public carve-out, back in their original order."""
        self._guard()
        if self.public is None or len(self.public) == 0:
            return self._train_images, self._train_labels
        if self.public_mask is None:
            return (
                np.concatenate([self._train_images, self.public.images], axis=0),
                np.concatenate([self._train_labels, self.public.labels]),
            )
        mask = self.public_mask
        width = self._train_images.shape[1]
        images = np.empty((mask.shape[0], width), dtype=self._train_images.dtype)
        labels = np.empty(mask.shape[0], dtype=self._train_labels.dtype)
        images[mask], labels[mask] = self.public.images, self.public.labels
        images[~mask], labels[~mask] = self._train_images, self._train_labels
        return images, labels

    def _zeroize(self) -> None:
        self._train_images.fill(0.0)
        self._train_labels.fill(0)
        self.retired = True


def split_tasks(
    train: RawDataset,
    test: RawDataset,
    pairs: Sequence[Tuple[int, int]] = DEFAULT_TASK_PAIRS,
) -> List[TaskDataset]:
    """One task per digit pair, rows kept in file order with global labels."""
    seen: set[int] = set()
    for pair in pairs:
        if pair[0] == pair[1] or seen.intersection(pair):
            raise DataError(
                f"task pair {pair} overlaps another pair",
                code=DataErrorCode.OVERLAPPING_PAIRS,
            )
        seen.update(pair)
    tasks = []
    for task_id, pair in enumerate(pairs):
        train_mask = np.isin(train.labels, pair)
        test_mask = np.isin(test.labels, pair)
        tasks.append(
            TaskDataset(
                task_id=task_id,
                pair=(int(pair[0]), int(pair[1])),
                test=LabeledRows(
                    images=test.images[test_mask].copy(),
                    labels=test.labels[test_mask].copy(),
                ),
                _train_images=train.images[train_mask].copy(),
                _train_labels=train.labels[train_mask].copy(),
            )
        )
    return tasks


def carve_public(
    task: TaskDataset, fraction: float, rng: RngState
) -> Tuple[LabeledRows, TaskDataset]:
    """Stratified public sample and the task reduced to its private remainder.

    ``floor(fraction * N)`` is split evenly over the pair's classes, rounding
    down; within a class rows are drawn uniformly without replacement. The
    input task is retired, so only the returned copy holds private rows.
    """
    if not 0.0 <= fraction < 1.0:
        raise DataError(f"public fraction must lie in [0, 1), got {fraction}")
    images = task.train_images()
    labels = task.train_labels()
    quota = math.floor(fraction * task.num_train) // len(task.pair)
    public_mask = np.zeros(task.num_train, dtype=bool)
    for digit in sorted(task.pair):
        rows = np.flatnonzero(labels == digit)
        take = min(quota, rows.shape[0])
        if take:
            public_mask[rows[rng.permutation(rows.shape[0])[:take]]] = True
    public = LabeledRows(
        images=images[public_mask].copy(), labels=labels[public_mask].copy()
    )
    private = TaskDataset(
        task_id=task.task_id,
        pair=task.pair,
        test=task.test,
        _train_images=images[~public_mask].copy(),
        _train_labels=labels[~public_mask].copy(),
        public=public,
        public_mask=public_mask,
        read_count=task.read_count,
    )
    task._zeroize()
    return public, private


class TaskStream:
    """Single-pass, single-owner iterator over tasks.

    The next task is only handed out once the previous one was retired. With a
    ``public_fraction`` the public carve-out of a task happens when it is
    consumed, so no private row is read before its own task starts.
    """

    def __init__(
        self,
        tasks: Sequence[TaskDataset],
        *,
        public_fraction: Optional[float] = None,
        carve_rngs: Optional[Sequence[RngState]] = None,
    ) -> None:
        self._tasks = list(tasks)
        self._next = 0
        self._public_fraction = public_fraction
        self._carve_rngs = list(carve_rngs) if carve_rngs is not None else []
        if public_fraction is not None and len(self._carve_rngs) != len(self._tasks):
            raise DataError(
                f"{len(self._carve_rngs)} carve streams for {len(self._tasks)} tasks"
            )

    def __len__(self) -> int:
        return len(self._tasks)

    @property
    def input_width(self) -> int:
        if not self._tasks:
            raise DataError("task stream is empty", code=DataErrorCode.EMPTY_DATA)
        return int(self._tasks[0].test.images.shape[1])

    @property
    def consumed(self) -> int:
        return self._next

    def seen_tests(self) -> List[LabeledRows]:
        return [task.test for task in self._tasks[: self._next]]

    def public_sets(self) -> List[LabeledRows]:
        """Public carve-outs of every task handed out so far."""
        return [
            task.public
            for task in self._tasks[: self._next]
            if task.public is not None
        ]

    def consume(self) -> TaskDataset:
        if self._next >= len(self._tasks):
            raise DataError(
                f"all {len(self._tasks)} tasks were already consumed",
                code=DataErrorCode.DOUBLE_CONSUME,
            )
        if self._next > 0 and not self._tasks[self._next - 1].retired:
            raise DataError(
                f"task {self._next - 1} must be retired before task "
                f"{self._next} is consumed",
                code=DataErrorCode.DOUBLE_CONSUME,
            )
        task = self._tasks[self._next]
        if self._public_fraction is not None:
            public, task = carve_public(
                task, self._public_fraction, self._carve_rngs[self._next]
            )
            self._tasks[self._next] = task
            logger.info(
                f"Task {task.task_id}: carved {len(public)} public rows, "
                f"{task.num_train} stay private"
            )
        self._next += 1
        logger.info(f"Consumed task {task.task_id} (digits {task.pair})")
        return task

    def read_counts(self) -> List[int]:
        """Private-row reads per task so far, in stream order."""
        return [task.read_count for task in self._tasks]

    def retire(self, task: TaskDataset) -> None:
        if task.retired:
            raise DataError(
                f"task {task.task_id} was already retired",
                code=DataErrorCode.ACCESS_AFTER_RETIRE,
            )
        if not any(known is task for known in self._tasks[: self._next]):
            raise DataError(f"task {task.task_id} was not consumed from this stream")
        task._zeroize()
        logger.info(f"Retired private data of task {task.task_id}")

    def __iter__(self) -> Iterator[TaskDataset]:
        while self._next < len(self._tasks):
            yield self.consume()


def build_task_stream(
    cfg: TaskConfig,
    rng: RngState,
    *,
    carve: bool,
    train: Optional[RawDataset] = None,
    test: Optional[RawDataset] = None,
) -> TaskStream:
    """Load (unless given), cap, downscale and split; ``carve`` defers public rows.

    One carve stream per task is split from ``rng`` here, in task order.
    """
    if train is None or test is None:
        if not cfg.data_dir:
            raise DataError(
                "data_dir is not configured", code=DataErrorCode.MISSING_FILE
            )
        train = load_mnist(cfg.data_dir, "train")
        test = load_mnist(cfg.data_dir, "test")
    train = cap_per_class(train, cfg.per_class_cap)
    if cfg.scale_factor > 1:
        train = RawDataset(downscale(train.images, cfg.scale_factor), train.labels)
        test = RawDataset(downscale(test.images, cfg.scale_factor), test.labels)
    tasks = split_tasks(train, test, cfg.task_pairs)
    for task in tasks:
        logger.info(
            f"Task {task.task_id} digits {task.pair}: {task.num_train} train, "
            f"{len(task.test)} test rows"
        )
    if not carve:
        return TaskStream(tasks)
    return TaskStream(
        tasks,
        public_fraction=cfg.public_fraction,
        carve_rngs=[rng.split() for _ in tasks],
    )
