"""Long-format CSV ingestion, synthetic ground truth and model persistence."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .epi import SirConfig, new_infections_curve
from .sir_fit import SirParams
from .tensor import FactorModel, as_tensor, reconstruct

INPUT_HEADER = ("location", "signal", "date", "value")
FORECAST_HEADER = ("location", "signal", "date", "value_predicted")
MODEL_FORMAT = "stelar-model/1"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class TensorBundle:
    tensor: np.ndarray
    location_labels: list[str]
    signal_labels: list[str]
    dates: list[dt.date]

    def __post_init__(self):
        self.tensor = as_tensor(self.tensor)
        M, N, L = self.tensor.shape
        if (len(self.location_labels), len(self.signal_labels), len(self.dates)) != (M, N, L):
            raise ValueError("label counts do not match tensor dimensions")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise ValueError("dates must be consecutive days")

    def future_dates(self, steps: int, offset: int = 0) -> list[dt.date]:
        last = self.dates[-1]
        return [last + dt.timedelta(days=offset + j + 1) for j in range(steps)]

    def head(self, length: int) -> "TensorBundle":
        """The first ``length`` slabs."""
        return TensorBundle(
            self.tensor[:, :, :length],
            list(self.location_labels),
            list(self.signal_labels),
            self.dates[:length],
        )


def _parse_date(text: str, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: invalid date {text!r} (expected YYYY-MM-DD)") from None


def ingest_csv(path, fill_policy: str = "zero") -> TensorBundle:
    """Read a ``location,signal,date,value`` CSV into a dense tensor.

    Labels keep their first-appearance order; the time axis spans every day
    from the earliest to the latest date. With ``fill_policy="error"`` any
    missing (location, signal, date) cell is rejected.
    """
    if fill_policy not in ("zero", "error"):
        raise ValueError("fill_policy must be 'zero' or 'error'")
    records = {}
    locations: dict[str, int] = {}
    signals: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != INPUT_HEADER:
            raise DataError(f"line 1: expected header {','.join(INPUT_HEADER)}, got {header}")
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
            loc, sig, date_text, value_text = (c.strip() for c in row)
            date = _parse_date(date_text, lineno)
            try:
                value = float(value_text)
            except ValueError:
                raise DataError(f"line {lineno}: value {value_text!r} is not a number") from None
            if not math.isfinite(value):
                raise DataError(f"line {lineno}: value must be finite")
            if value < 0:
                raise DataError(f"line {lineno}: negative value {value}")
            key = (loc, sig, date)
            if key in records:
                raise DataError(
                    f"line {lineno}: duplicate entry for ({loc}, {sig}, {date}) "
                    f"first seen on line {records[key][1]}"
                )
            records[key] = (value, lineno)
            locations.setdefault(loc, len(locations))
            signals.setdefault(sig, len(signals))
    if not records:
        raise DataError("no data rows")

    all_dates = sorted({d for (_, _, d) in records})
    start, end = all_dates[0], all_dates[-1]
    L = (end - start).days + 1
    if fill_policy == "error" and len(all_dates) != L:
        raise DataError("dates are not consecutive")
    X = np.zeros((len(locations), len(signals), L))
    filled = np.zeros(X.shape, dtype=bool)
    for (loc, sig, date), (value, _) in records.items():
        idx = (locations[loc], signals[sig], (date - start).days)
        X[idx] = value
        filled[idx] = True
    if fill_policy == "error" and not filled.all():
        m, n, t = np.argwhere(~filled)[0]
        raise DataError(
            f"missing value for ({list(locations)[m]}, {list(signals)[n]}, "
            f"{start + dt.timedelta(days=int(t))})"
        )
    dates = [start + dt.timedelta(days=j) for j in range(L)]
    return TensorBundle(X, list(locations), list(signals), dates)


def write_csv(bundle: TensorBundle, path) -> None:
    """Write ``bundle`` in the long format read by :func:`ingest_csv`."""
    _write_long(path, INPUT_HEADER, bundle.tensor, bundle.location_labels,
                bundle.signal_labels, bundle.dates)


def write_forecast_csv(path, forecast: np.ndarray, locations, signals, dates) -> None:
    _write_long(path, FORECAST_HEADER, forecast, locations, signals, dates)


def _write_long(path, header, X, locations, signals, dates):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for m, loc in enumerate(locations):
            for n, sig in enumerate(signals):
                for t, day in enumerate(dates):
                    w.writerow([loc, sig, day.isoformat(), repr(float(X[m, n, t]))])


# --- synthetic data -------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Ground-truth generator settings.

    ``components`` holds one :class:`SirConfig` per latent component in
    population-normalized units; when ``None`` they are drawn from ``seed``.
    Curves are multiplied by ``scale`` so entries look like case counts.
    ``horizon`` extra steps of each curve are kept as the true continuation.
    """

    M: int = 20
    N: int = 5
    L: int = 60
    K: int = 3
    noise_level: float = 0.0
    seed: int = 0
    components: list[SirConfig] | None = None
    scale: float = 1000.0
    horizon: int = 15

    def __post_init__(self):
        if min(self.M, self.N, self.L, self.K) < 1:
            raise ValueError("dimensions and rank must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if self.components is not None and len(self.components) != self.K:
            raise ValueError("need one SirConfig per component")


@dataclass
class GroundTruth:
    model: FactorModel
    sir: SirParams
    C_extended: np.ndarray
    signal: np.ndarray
    noise: np.ndarray = field(repr=False)


def _peak_time(beta: float, gamma: float, i0: float, horizon: int) -> int:
    return int(np.argmax(new_infections_curve(SirConfig(1.0 - i0, i0, beta, gamma, horizon))))


def random_components(K: int, rng: np.random.Generator, horizon: int,
                      window: int | None = None) -> list[SirConfig]:
    """SIR settings whose incidence peaks are staggered across ``window``.

    Component k peaks near ``window * (0.2 + 0.75 * (k + u) / K)`` with
    ``u ~ U(0, 1)``, so later components are still rising at the end of the
    window. The peak time is hit by bisection on ``log10(i0)``.
    """
    window = horizon if window is None else window
    out = []
    for k in range(K):
        beta = float(rng.uniform(0.25, 0.45))
        gamma = float(rng.uniform(0.05, 0.15))
        target = window * (0.2 + 0.75 * (k + rng.uniform()) / K)
        lo, hi = -8.0, -0.5  # log10(i0); later peaks need smaller i0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if _peak_time(beta, gamma, 10**mid, 4 * horizon) > target:
                lo = mid
            else:
                hi = mid
        i0 = float(10 ** (0.5 * (lo + hi)))
        out.append(SirConfig(s0=1.0 - i0, i0=i0, beta=beta, gamma=gamma, horizon=horizon))
    return out


def generate_synthetic(spec: SyntheticSpec, start_date: dt.date = dt.date(2020, 3, 1)):
    """Noisy low-rank tensor whose temporal factors are SIR incidence curves.

    Returns ``(bundle, truth)``; ``truth.C_extended`` has ``L + horizon`` rows.
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.L + spec.horizon
    comps = spec.components or random_components(spec.K, rng, total, spec.L)
    curves = np.column_stack([
        new_infections_curve(SirConfig(c.s0, c.i0, c.beta, c.gamma, total)) for c in comps
    ])
    C_ext = spec.scale * curves
    A = rng.uniform(0.0, 1.0, size=(spec.M, spec.K))
    B = rng.uniform(0.0, 1.0, size=(spec.N, spec.K))
    model = FactorModel(A, B, C_ext[: spec.L])
    signal = reconstruct(model)
    noise = np.zeros_like(signal)
    if spec.noise_level > 0:
        rms = np.linalg.norm(signal) / math.sqrt(signal.size)
        noise = spec.noise_level * rms * rng.standard_normal(signal.shape)
    X = np.maximum(signal + noise, 0.0)
    sir = SirParams(
        [c.beta for c in comps], [c.gamma for c in comps],
        [c.s0 for c in comps], [c.i0 for c in comps],
    ).rescaled(spec.scale)
    bundle = TensorBundle(
        X,
        [f"loc{m:03d}" for m in range(spec.M)],
        [f"sig{n:02d}" for n in range(spec.N)],
        [start_date + dt.timedelta(days=t) for t in range(spec.L)],
    )
    return bundle, GroundTruth(model, sir, C_ext, signal, X - signal)


# --- persistence ----------------------------------------------------------


def _matrix_doc(F: np.ndarray) -> dict:
    return {"rows": F.shape[0], "cols": F.shape[1], "data": F.ravel().tolist()}


def _matrix_from_doc(doc: dict) -> np.ndarray:
    return np.asarray(doc["data"], dtype=float).reshape(doc["rows"], doc["cols"])


def save_model(path, fitted, bundle: TensorBundle | None = None) -> None:
    """Write a fitted model as a single JSON document."""
    from .engine import hyperparams_to_dict

    doc = {
        "format": MODEL_FORMAT,
        "dims": {"M": fitted.model.shape[0], "N": fitted.model.shape[1],
                 "L_fit": fitted.n_fit, "L_total": fitted.n_total, "K": fitted.model.rank},
        "factors": {name: _matrix_doc(F) for name, F in
                    (("A", fitted.model.A), ("B", fitted.model.B), ("C", fitted.model.C))},
        "sir": {name: vec.tolist() for name, vec in
                zip(("beta", "gamma", "s", "i"), fitted.sir.as_tuple())},
        "hyperparams": hyperparams_to_dict(fitted.hp),
        "objective_trace": list(map(float, fitted.objective_trace)),
        "val_rmse_trace": list(map(float, fitted.val_rmse_trace)),
        "best_iteration": fitted.best_iteration,
        "stopped_reason": fitted.stopped_reason,
    }
    if bundle is not None:
        doc["labels"] = {
            "locations": bundle.location_labels,
            "signals": bundle.signal_labels,
            "dates": [d.isoformat() for d in bundle.dates],
        }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path):
    """Inverse of :func:`save_model`; returns ``(fitted, labels_or_None)``."""
    from .engine import FittedStelar, hyperparams_from_dict

    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a {MODEL_FORMAT} document")
    f = doc["factors"]
    model = FactorModel(*(_matrix_from_doc(f[k]) for k in ("A", "B", "C")))
    sir = SirParams(**doc["sir"])
    fitted = FittedStelar(
        model=model,
        sir=sir,
        hp=hyperparams_from_dict(doc["hyperparams"]),
        objective_trace=doc["objective_trace"],
        val_rmse_trace=doc["val_rmse_trace"],
        best_iteration=doc["best_iteration"],
        stopped_reason=doc["stopped_reason"],
        n_total=doc["dims"]["L_total"],
    )
    labels = doc.get("labels")
    if labels is not None:
        labels = dict(labels, dates=[dt.date.fromisoformat(d) for d in labels["dates"]])
    return fitted, labels


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def write_truth(path, truth: GroundTruth) -> None:
    doc = {
        "A": _matrix_doc(truth.model.A),
        "B": _matrix_doc(truth.model.B),
        "C_extended": _matrix_doc(truth.C_extended),
        "sir": {name: vec.tolist() for name, vec in
                zip(("beta", "gamma", "s", "i"), truth.sir.as_tuple())},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def spec_to_dict(spec: SyntheticSpec) -> dict:
    d = {f.name: getattr(spec, f.name) for f in fields(spec) if f.name != "components"}
    if spec.components is not None:
        d["components"] = [asdict(c) for c in spec.components]
    return d
