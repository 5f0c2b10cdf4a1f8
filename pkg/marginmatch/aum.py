"""Per-class margins, EMA-smoothed Area-Under-the-Margin trackers and AUM-cutoff calibration."""

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CalibrationUnavailableError,
    InvalidConfigError,
    InvalidInputError,
    OutOfOrderUpdateError,
)
from .models import AumTracker, LogitRecord


def _validate_delta(delta: float) -> None:
    if not 0.0 < delta <= 1.0:
        raise InvalidConfigError(f"delta must lie in (0, 1], got {delta}")


def margin_matrix(logits) -> np.ndarray:
    """
    Margins of every class for a batch of logit rows.

    Entry (n, c) is ``logits[n, c] - max_{i != c} logits[n, i]``.

    Args:
        logits: Array of shape (N, K) with K >= 2

    Returns:
        Float64 array of shape (N, K)

    Raises:
        InvalidInputError: On wrong shape or non-finite entries
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise InvalidInputError(f"logits must have shape (N, K>=2), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("logits contain non-finite values")
    rows = np.arange(z.shape[0])
    top = np.argmax(z, axis=1)
    runner_up = np.partition(z, -2, axis=1)[:, -2]
    largest_other = np.repeat(z[rows, top][:, None], z.shape[1], axis=1)
    largest_other[rows, top] = runner_up
    return z - largest_other


def margin_vector(logits) -> np.ndarray:
    """
    Margins of every class for one logit vector.

    Raises:
        InvalidInputError: If ``logits`` is not a finite vector of length >= 2
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidInputError(f"logits must be a vector, got shape {z.shape}")
    return margin_matrix(z[None, :])[0]


def threshold_margin(logits, virtual_class: int) -> float:
    """
    Margin of the virtual class, the one assigned to threshold samples.

    Raises:
        InvalidInputError: If ``virtual_class`` is not the last index
    """
    margins = margin_vector(logits)
    if virtual_class != margins.shape[0] - 1:
        raise InvalidInputError(
            f"virtual class must be the last index {margins.shape[0] - 1}, got {virtual_class}"
        )
    return float(margins[virtual_class])


def ema_update(tracker: AumTracker, margins, t: int, delta: float) -> AumTracker:
    """
    Fold one pass worth of margins into a tracker.

    ``AUM^t = M^t * delta/(1+t) + AUM^{t-1} * (1 - delta/(1+t))``

    Args:
        tracker: Tracker holding AUM^{t-1}
        margins: Margin vector observed at pass t
        t: Pass index, must equal ``tracker.last_t + 1``
        delta: Smoothing in (0, 1]

    Returns:
        A new tracker; the input is left untouched

    Raises:
        InvalidConfigError: If delta is outside (0, 1]
        OutOfOrderUpdateError: If t is not consecutive
        InvalidInputError: If the margin vector has the wrong length
    """
    _validate_delta(delta)
    if t != tracker.last_t + 1:
        raise OutOfOrderUpdateError(
            f"example {tracker.example_id}: expected pass {tracker.last_t + 1}, got {t}"
        )
    m = np.asarray(margins, dtype=np.float64)
    previous = np.asarray(tracker.aum, dtype=np.float64)
    if m.shape != previous.shape:
        raise InvalidInputError(f"margin length {m.shape} does not match tracker {previous.shape}")
    w = delta / (1 + t)
    updated = m * w + previous * (1.0 - w)
    return tracker.model_copy(
        update={
            "aum": tuple(float(v) for v in updated),
            "last_t": t,
            "update_count": tracker.update_count + 1,
        }
    )


def update_tracker(tracker: AumTracker, record: LogitRecord, delta: float) -> AumTracker:
    """Fold a logit record into its tracker (margins computed from the record's logits)."""
    if record.example_id != tracker.example_id:
        raise InvalidInputError(
            f"record for example {record.example_id} applied to tracker {tracker.example_id}"
        )
    return ema_update(tracker, margin_vector(record.logits), record.iteration, delta)


def aum_of_class(tracker: AumTracker, c: int) -> float:
    """
    Look up the AUM of class ``c``.

    Raises:
        InvalidInputError: If c is out of range
    """
    if not 0 <= c < len(tracker.aum):
        raise InvalidInputError(f"class {c} out of range [0, {len(tracker.aum)})")
    return tracker.aum[c]


def calibrate_gamma(threshold_sample_aums: Iterable[float], percentile: float) -> float:
    """
    Nearest-rank percentile of the threshold samples' virtual-class AUMs.

    Sorts ascending and returns the element at 1-indexed rank ``ceil(percentile/100 * N)``.

    Raises:
        CalibrationUnavailableError: If there are no threshold-sample AUMs
        InvalidConfigError: If percentile is outside (0, 100]
        InvalidInputError: If any value is non-finite
    """
    if not 0.0 < percentile <= 100.0:
        raise InvalidConfigError(f"percentile must lie in (0, 100], got {percentile}")
    values = np.sort(np.asarray(list(threshold_sample_aums), dtype=np.float64))
    if values.size == 0:
        raise CalibrationUnavailableError("no threshold samples to calibrate the AUM cutoff")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("threshold-sample AUMs contain non-finite values")
    rank = max(1, math.ceil(percentile * values.size / 100.0))
    return float(values[rank - 1])


class AumBank:
    """
    Trackers of many examples stored as one array.

    Row ``i`` of :attr:`aum` is the tracker of ``example_ids[i]``. Updates apply the same
    recurrence as :func:`ema_update`, so a bank and a list of trackers fed the same
    margins agree bit for bit.
    """

    def __init__(self, example_ids: Sequence[int], num_outputs: int):
        """
        Initialize zeroed trackers.

        Args:
            example_ids: Identifiers, one per row
            num_outputs: C+1
        """
        if num_outputs < 2:
            raise InvalidInputError("trackers need at least two classes")
        self.example_ids = np.asarray(example_ids, dtype=np.int64)
        self.num_outputs = num_outputs
        self.aum = np.zeros((self.example_ids.size, num_outputs), dtype=np.float64)
        self.last_t = np.zeros(self.example_ids.size, dtype=np.int64)
        self.update_count = np.zeros(self.example_ids.size, dtype=np.int64)
        self._rows = {int(e): i for i, e in enumerate(self.example_ids)}
        if len(self._rows) != self.example_ids.size:
            raise InvalidInputError("duplicate example ids in AUM bank")

    def __len__(self) -> int:
        return int(self.example_ids.size)

    def rows_for(self, example_ids: Iterable[int]) -> np.ndarray:
        """Map example ids to row indices."""
        try:
            return np.array([self._rows[int(e)] for e in example_ids], dtype=np.int64)
        except KeyError as e:
            raise InvalidInputError(f"unknown example id {e.args[0]}") from None

    def update(self, rows: np.ndarray, margins: np.ndarray, t: int, delta: float) -> None:
        """
        Fold pass-``t`` margins into the given rows.

        Raises:
            OutOfOrderUpdateError: If any row was not last updated at pass t-1
        """
        _validate_delta(delta)
        rows = np.asarray(rows, dtype=np.int64)
        margins = np.asarray(margins, dtype=np.float64)
        if margins.shape != (rows.size, self.num_outputs):
            raise InvalidInputError(f"margins shape {margins.shape} does not match rows")
        if np.unique(rows).size != rows.size:
            raise InvalidInputError("a tracker may be updated only once per call")
        stale = self.last_t[rows] != t - 1
        if np.any(stale):
            bad = int(self.example_ids[rows[stale][0]])
            raise OutOfOrderUpdateError(f"example {bad}: update for pass {t} is not consecutive")
        w = delta / (1 + t)
        self.aum[rows] = margins * w + self.aum[rows] * (1.0 - w)
        self.last_t[rows] = t
        self.update_count[rows] += 1

    def aum_at(self, rows: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """AUM of one class per row."""
        return self.aum[np.asarray(rows, dtype=np.int64), np.asarray(classes, dtype=np.int64)]

    def tracker(self, example_id: int) -> AumTracker:
        """Snapshot one row as an immutable tracker."""
        row = self.rows_for([example_id])[0]
        return AumTracker(
            example_id=int(example_id),
            aum=tuple(float(v) for v in self.aum[row]),
            last_t=int(self.last_t[row]),
            update_count=int(self.update_count[row]),
        )

    def trackers(self) -> list[AumTracker]:
        """Snapshot every row."""
        return [self.tracker(int(e)) for e in self.example_ids]

    @classmethod
    def from_arrays(
        cls,
        example_ids: np.ndarray,
        aum: np.ndarray,
        last_t: np.ndarray,
        update_count: np.ndarray,
    ) -> "AumBank":
        """Rebuild a bank from checkpointed arrays."""
        bank = cls(example_ids, aum.shape[1])
        bank.aum[...] = aum
        bank.last_t[...] = last_t
        bank.update_count[...] = update_count
        return bank
