"""Series ingestion, chronological splitting, normalization, and windowing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError, SplitError, ValidationError, WindowError


@dataclass(frozen=True)
class SeriesFrame:
    """T x N observation matrix sampled at a fixed interval."""

    values: np.ndarray
    step_minutes: float = 5.0
    t0: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"series values must be 2-D (T x N), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("series values contain non-finite entries")
        if self.step_minutes <= 0:
            raise ValidationError("step_minutes must be positive")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_sensors(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSet:
    """Supervised windows for direct step-p forecasting.

    inputs[b, h] is the observation h+1 steps before the forecast origin of
    window b (newest lag first); inputs_shifted is inputs advanced by one more
    step into the past, with the out-of-window row replaced by the in-window
    mean. anchors[b] equals inputs[b, 0]; targets[b] is the observation
    horizon_step steps past the origin.
    """

    inputs: np.ndarray          # (B, H, N)
    inputs_shifted: np.ndarray  # (B, H, N)
    anchors: np.ndarray         # (B, N)
    targets: np.ndarray         # (B, N)
    horizon_step: int

    def __post_init__(self):
        for name in ("inputs", "inputs_shifted", "anchors", "targets"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def batch(self) -> int:
        return self.inputs.shape[0]

    @property
    def history(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_sensors(self) -> int:
        return self.inputs.shape[2]

    def take(self, indices) -> "WindowSet":
        """Row subset, preserving all derived arrays."""
        return WindowSet(
            inputs=self.inputs[indices],
            inputs_shifted=self.inputs_shifted[indices],
            anchors=self.anchors[indices],
            targets=self.targets[indices],
            horizon_step=self.horizon_step,
        )


def ingest_csv(path, step_minutes: float = 5.0) -> SeriesFrame:
    """Read a sensor series CSV (one header row naming columns, one row per step).

    Raises ParseError with the offending (row, column) for ragged rows or
    non-numeric cells; rows are indexed from 0 over the data body. Rows that
    parse but contain NaN/Inf are rejected with their indices reported.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, missing header row") from None
        header = [h.strip() for h in header]
        if len(header) == 0 or all(h == "" for h in header):
            raise ParseError(f"{path}: header names zero sensor columns")
        if all(_is_number(h) for h in header):
            raise ParseError(
                f"{path}: first row is numeric; expected a header row naming sensors"
            )
        n = len(header)
        rows = []
        nonfinite_rows = []
        for r, row in enumerate(reader):
            if len(row) != n:
                raise ParseError(
                    f"{path}: row {r} has {len(row)} columns, expected {n}", row=r
                )
            vals = np.empty(n, dtype=np.float64)
            for c, cell in enumerate(row):
                try:
                    vals[c] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}",
                        row=r,
                        column=c,
                    ) from None
            if not np.all(np.isfinite(vals)):
                nonfinite_rows.append(r)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    if nonfinite_rows:
        raise ValidationError(
            f"{path}: non-finite values in rows {nonfinite_rows}; "
            "clean the series before ingestion"
        )
    return SeriesFrame(values=np.vstack(rows), step_minutes=step_minutes)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def save_series_csv(frame: SeriesFrame, path) -> None:
    """Write a frame with a sensor_0..sensor_{N-1} header. Lossless round-trip."""
    n = frame.num_sensors
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"sensor_{i}" for i in range(n)))
        fh.write("\n")
        for row in frame.values:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def chronological_split(
    frame: SeriesFrame, train_frac: float = 0.7, val_frac: float = 0.1
) -> tuple[SeriesFrame, SeriesFrame, SeriesFrame]:
    """Contiguous, order-preserving train/val/test segments covering all rows."""
    if train_frac <= 0 or val_frac <= 0:
        raise ValidationError("split fractions must be positive")
    if train_frac + val_frac >= 1:
        raise ValidationError("train_frac + val_frac must be < 1")
    t = frame.num_steps
    n_train = int(t * train_frac)
    n_val = int(t * val_frac)
    n_test = t - n_train - n_val
    if n_train == 0 or n_val == 0 or n_test == 0:
        raise SplitError(
            f"split of T={t} with fractions ({train_frac}, {val_frac}) produces "
            f"sizes ({n_train}, {n_val}, {n_test}); every segment must be nonempty"
        )
    parts = (
        frame.values[:n_train],
        frame.values[n_train : n_train + n_val],
        frame.values[n_train + n_val :],
    )
    return tuple(replace(frame, values=p.copy()) for p in parts)


def shift_with_mean(windows: np.ndarray, shift: int = 1) -> np.ndarray:
    """Advance window rows `shift` steps further into the past.

    Rows that would fall outside the window are replaced by the mean of the
    in-window rows. Accepts a single (H, N) window or a batch (..., H, N).
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim < 2:
        raise ValidationError("windows must have at least two dimensions (H, N)")
    h = w.shape[-2]
    if shift < 1:
        raise ValidationError("shift must be >= 1")
    mean = w.mean(axis=-2, keepdims=True)
    keep = max(h - shift, 0)
    pad = np.broadcast_to(mean, w.shape[:-2] + (h - keep, w.shape[-1]))
    return np.concatenate([w[..., shift:, :], pad], axis=-2)


def make_windows(frame: SeriesFrame, history: int, horizon_step: int = 0) -> WindowSet:
    """Build all supervised windows for direct step-p forecasting.

    B = T - H - p windows; window b forecasts row H + b + p from the H rows
    preceding row H + b.
    """
    if history < 2:
        raise ValidationError("history must be >= 2 (the shifted window needs one more lag)")
    if horizon_step < 0:
        raise ValidationError("horizon_step must be >= 0")
    t = frame.num_steps
    b = t - history - horizon_step
    if b < 1:
        raise WindowError(
            f"series of T={t} too short for history={history}, "
            f"horizon_step={horizon_step} (need T >= {history + horizon_step + 1})"
        )
    values = frame.values
    # inputs[b, h] = values[history + b - 1 - h], newest lag first
    row_idx = (history - 1 - np.arange(history))[None, :] + np.arange(b)[:, None]
    inputs = values[row_idx]
    targets = values[history + horizon_step + np.arange(b)]
    return WindowSet(
        inputs=inputs,
        inputs_shifted=shift_with_mean(inputs, 1),
        anchors=inputs[:, 0].copy(),
        targets=targets,
        horizon_step=horizon_step,
    )


class Normalizer:
    """Optional per-sensor z-score transform, fitted on the training split only.

    Constant sensors get unit standard deviation so the transform stays
    invertible.
    """

    def __init__(self, mode: str = "none"):
        if mode not in ("none", "zscore"):
            raise ValidationError(f"unknown normalizer mode {mode!r}")
        self.mode = mode
        self.mean_ = None
        self.std_ = None

    def fit(self, values: np.ndarray) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        self.mean_ = v.mean(axis=0)
        std = v.std(axis=0)
        std[std <= 1e-12] = 1.0
        self.std_ = std
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return np.asarray(values, dtype=np.float64).copy()
        self._check_fitted()
        return (np.asarray(values, dtype=np.float64) - self.mean_) / self.std_

    def inverse(self, values: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return np.asarray(values, dtype=np.float64).copy()
        self._check_fitted()
        return np.asarray(values, dtype=np.float64) * self.std_ + self.mean_

    def _check_fitted(self):
        if self.mean_ is None:
            raise ValidationError("normalizer used before fit()")

    def to_blob(self) -> dict:
        blob = {"mode": self.mode}
        if self.mean_ is not None:
            blob["mean"] = [float(x) for x in self.mean_]
            blob["std"] = [float(x) for x in self.std_]
        return blob

    @classmethod
    def from_blob(cls, blob: dict) -> "Normalizer":
        norm = cls(mode=blob.get("mode", "none"))
        if "mean" in blob:
            norm.mean_ = np.asarray(blob["mean"], dtype=np.float64)
            norm.std_ = np.asarray(blob["std"], dtype=np.float64)
        return norm
