"""Areal count-panel ingestion and validation.

A panel is three CSV files:

* counts.csv      area_id, week, count        (long format, one row per cell)
* areas.csv       area_id, population, <covariate columns...>
* adjacency.csv   area_id, neighbor_id        (one edge per row, both ways)

Weeks must form one consecutive integer range shared by every area.
Adjacency must be symmetric and loop-free. All problems are reported with
file and line number; nothing is silently repaired.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PanelValidationError(ValueError):
    """Raised when panel inputs violate the format contract."""

    def __init__(self, findings: list[str]):
        self.findings = list(findings)
        super().__init__("\n".join(self.findings))


@dataclass
class CountPanel:
    """In-memory panel: counts indexed (area, week) plus static area data.

    counts           (N, T) int64, column t holds week week_index[t]
    week_index       (T,) consecutive integers
    area_ids         length-N labels, fixed ordering for all arrays
    populations      (N,) > 0
    covariates       (N, D) raw (unscaled, uncentered) area-level covariates
    covariate_names  length-D labels
    adjacency        (N, N) symmetric boolean, zero diagonal
    """

    counts: np.ndarray
    week_index: np.ndarray
    area_ids: list[str]
    populations: np.ndarray
    covariates: np.ndarray
    covariate_names: list[str]
    adjacency: np.ndarray
    neighbor_lists: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.week_index = np.asarray(self.week_index, dtype=np.int64)
        self.populations = np.asarray(self.populations, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(len(self.area_ids), -1)
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        issues = self.validate()
        if issues:
            raise PanelValidationError(issues)
        self.neighbor_lists = [np.flatnonzero(self.adjacency[i]) for i in range(self.n_areas)]

    @property
    def n_areas(self) -> int:
        return self.counts.shape[0]

    @property
    def n_weeks(self) -> int:
        return self.counts.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def validate(self) -> list[str]:
        issues = []
        n, t = self.counts.shape
        if len(self.area_ids) != n:
            issues.append(f"{len(self.area_ids)} area ids for {n} count rows")
        if len(set(self.area_ids)) != len(self.area_ids):
            issues.append("duplicate area ids")
        if self.week_index.shape != (t,):
            issues.append(f"week index length {self.week_index.shape} != {t}")
        elif t > 1 and np.any(np.diff(self.week_index) != 1):
            issues.append("week index is not consecutive")
        if self.populations.shape != (n,):
            issues.append("populations shape mismatch")
        elif np.any(~np.isfinite(self.populations)) or np.any(self.populations <= 0):
            issues.append("populations must be finite and > 0")
        if self.covariates.shape[0] != n:
            issues.append("covariates shape mismatch")
        if len(self.covariate_names) != self.covariates.shape[1]:
            issues.append("covariate name count mismatch")
        if np.any(~np.isfinite(self.covariates)):
            issues.append("covariates must be finite")
        if self.adjacency.shape != (n, n):
            issues.append("adjacency shape mismatch")
        else:
            if np.any(np.diag(self.adjacency)):
                issues.append("adjacency has self-loops")
            if not np.array_equal(self.adjacency, self.adjacency.T):
                issues.append("adjacency is not symmetric")
        if np.any(self.counts < 0):
            issues.append("negative counts")
        return issues

    def truncate_weeks(self, n_weeks: int) -> "CountPanel":
        """Panel restricted to the first n_weeks columns."""
        if not (1 <= n_weeks <= self.n_weeks):
            raise ValueError(f"n_weeks must be in [1, {self.n_weeks}]")
        return CountPanel(
            counts=self.counts[:, :n_weeks].copy(),
            week_index=self.week_index[:n_weeks].copy(),
            area_ids=list(self.area_ids),
            populations=self.populations.copy(),
            covariates=self.covariates.copy(),
            covariate_names=list(self.covariate_names),
            adjacency=self.adjacency.copy(),
        )


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    """Read a CSV; returns (header, [(line_number, fields), ...])."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [(i + 1, row) for i, row in enumerate(reader) if row and any(f.strip() for f in row)]
    if not rows:
        raise PanelValidationError([f"{path.name}:1: file is empty"])
    header_line, header = rows[0]
    return [h.strip() for h in header], rows[1:]


def load_panel(counts_path, areas_path, adjacency_path) -> CountPanel:
    """Parse and cross-validate the three panel files.

    Raises PanelValidationError listing every problem found, each prefixed
    with file name and line number.
    """
    counts_path, areas_path, adjacency_path = (
        Path(counts_path),
        Path(areas_path),
        Path(adjacency_path),
    )
    findings: list[str] = []

    # --- areas ---
    header, rows = _read_rows(areas_path)
    if len(header) < 2 or header[0] != "area_id" or header[1] != "population":
        raise PanelValidationError(
            [f"{areas_path.name}:1: header must start with area_id,population"]
        )
    covariate_names = header[2:]
    area_ids: list[str] = []
    populations: list[float] = []
    covariates: list[list[float]] = []
    seen = {}
    for line, row in rows:
        if len(row) != len(header):
            findings.append(f"{areas_path.name}:{line}: expected {len(header)} fields, got {len(row)}")
            continue
        aid = row[0].strip()
        if aid in seen:
            findings.append(f"{areas_path.name}:{line}: duplicate area_id {aid!r} (first at line {seen[aid]})")
            continue
        seen[aid] = line
        try:
            pop = float(row[1])
        except ValueError:
            findings.append(f"{areas_path.name}:{line}: population {row[1]!r} is not a number")
            continue
        if not np.isfinite(pop) or pop <= 0:
            findings.append(f"{areas_path.name}:{line}: population must be finite and > 0, got {row[1]}")
            continue
        covs = []
        bad = False
        for name, f in zip(covariate_names, row[2:]):
            try:
                v = float(f)
            except ValueError:
                findings.append(f"{areas_path.name}:{line}: covariate {name!r} value {f!r} is not a number")
                bad = True
                break
            if not np.isfinite(v):
                findings.append(f"{areas_path.name}:{line}: covariate {name!r} must be finite")
                bad = True
                break
            covs.append(v)
        if bad:
            continue
        area_ids.append(aid)
        populations.append(pop)
        covariates.append(covs)
    if not area_ids and not findings:
        findings.append(f"{areas_path.name}:1: no area rows")
    area_pos = {aid: k for k, aid in enumerate(area_ids)}

    # --- counts ---
    header, rows = _read_rows(counts_path)
    if header != ["area_id", "week", "count"]:
        raise PanelValidationError(
            [f"{counts_path.name}:1: header must be area_id,week,count, got {','.join(header)}"]
        )
    cells: dict[tuple[str, int], int] = {}
    first_line: dict[tuple[str, int], int] = {}
    weeks_by_area: dict[str, set[int]] = {aid: set() for aid in area_ids}
    for line, row in rows:
        if len(row) != 3:
            findings.append(f"{counts_path.name}:{line}: expected 3 fields, got {len(row)}")
            continue
        aid = row[0].strip()
        if aid not in area_pos:
            findings.append(f"{counts_path.name}:{line}: unknown area_id {aid!r}")
            continue
        try:
            week = int(row[1])
        except ValueError:
            findings.append(f"{counts_path.name}:{line}: week {row[1]!r} is not an integer")
            continue
        try:
            cnt = int(row[2])
        except ValueError:
            findings.append(f"{counts_path.name}:{line}: count {row[2]!r} is not an integer")
            continue
        if cnt < 0:
            findings.append(f"{counts_path.name}:{line}: count must be >= 0, got {cnt}")
            continue
        key = (aid, week)
        if key in cells:
            findings.append(
                f"{counts_path.name}:{line}: duplicate (area_id, week) = ({aid!r}, {week}) "
                f"(first at line {first_line[key]})"
            )
            continue
        cells[key] = cnt
        first_line[key] = line
        weeks_by_area[aid].add(week)

    week_values: np.ndarray | None = None
    if cells and not findings:
        all_weeks = sorted({w for _, w in cells})
        lo, hi = all_weeks[0], all_weeks[-1]
        expected = set(range(lo, hi + 1))
        for aid in area_ids:
            got = weeks_by_area[aid]
            missing = sorted(expected - got)
            if missing:
                head = ", ".join(str(w) for w in missing[:5])
                more = "" if len(missing) <= 5 else f" (+{len(missing) - 5} more)"
                findings.append(f"{counts_path.name}: area {aid!r} missing weeks {head}{more}")
        if not findings:
            week_values = np.arange(lo, hi + 1, dtype=np.int64)
    elif not cells:
        findings.append(f"{counts_path.name}: no count rows")

    # --- adjacency ---
    header, rows = _read_rows(adjacency_path)
    if header != ["area_id", "neighbor_id"]:
        raise PanelValidationError(
            [f"{adjacency_path.name}:1: header must be area_id,neighbor_id, got {','.join(header)}"]
        )
    edges: set[tuple[str, str]] = set()
    edge_line: dict[tuple[str, str], int] = {}
    for line, row in rows:
        if len(row) != 2:
            findings.append(f"{adjacency_path.name}:{line}: expected 2 fields, got {len(row)}")
            continue
        a, b = row[0].strip(), row[1].strip()
        for aid in (a, b):
            if aid not in area_pos:
                findings.append(f"{adjacency_path.name}:{line}: unknown area_id {aid!r}")
                break
        else:
            if a == b:
                findings.append(f"{adjacency_path.name}:{line}: self-loop on area {a!r}")
                continue
            if (a, b) in edges:
                findings.append(
                    f"{adjacency_path.name}:{line}: duplicate edge ({a!r}, {b!r}) "
                    f"(first at line {edge_line[(a, b)]})"
                )
                continue
            edges.add((a, b))
            edge_line[(a, b)] = line
    for a, b in sorted(edges):
        if (b, a) not in edges:
            findings.append(
                f"{adjacency_path.name}:{edge_line[(a, b)]}: edge ({a!r}, {b!r}) has no "
                f"reverse ({b!r}, {a!r}); adjacency must be symmetric"
            )

    if findings:
        raise PanelValidationError(findings)

    assert week_values is not None
    n, t = len(area_ids), week_values.size
    counts = np.zeros((n, t), dtype=np.int64)
    for (aid, week), cnt in cells.items():
        counts[area_pos[aid], week - week_values[0]] = cnt
    adjacency = np.zeros((n, n), dtype=bool)
    for a, b in edges:
        adjacency[area_pos[a], area_pos[b]] = True

    return CountPanel(
        counts=counts,
        week_index=week_values,
        area_ids=area_ids,
        populations=np.asarray(populations),
        covariates=np.asarray(covariates, dtype=float).reshape(n, len(covariate_names)),
        covariate_names=covariate_names,
        adjacency=adjacency,
    )


def write_panel(panel: CountPanel, out_dir) -> dict[str, Path]:
    """Write counts/areas/adjacency CSVs; returns the paths written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "counts": out_dir / "counts.csv",
        "areas": out_dir / "areas.csv",
        "adjacency": out_dir / "adjacency.csv",
    }
    with open(paths["counts"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "week", "count"])
        for i, aid in enumerate(panel.area_ids):
            for t, week in enumerate(panel.week_index):
                w.writerow([aid, int(week), int(panel.counts[i, t])])
    with open(paths["areas"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "population"] + list(panel.covariate_names))
        for i, aid in enumerate(panel.area_ids):
            w.writerow(
                [aid, repr(float(panel.populations[i]))]
                + [repr(float(v)) for v in panel.covariates[i]]
            )
    with open(paths["adjacency"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "neighbor_id"])
        for i, aid in enumerate(panel.area_ids):
            for j in np.flatnonzero(panel.adjacency[i]):
                w.writerow([aid, panel.area_ids[j]])
    return paths
