"""Per-iteration trajectories and their CSV form.

Column order: ``step, lambda_0..lambda_{m-1}, [p_0..p_{m-1}], loss_val,
loss_trn, lambda_update_norm, elapsed_seconds``.  Floats use 17 significant
digits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


def fmt17(x) -> str:
    return format(float(x), ".17g")


@dataclass
class RunRecord:
    dim_lambda: int
    with_mixture: bool = False
    rows: list = field(default_factory=list)
    final: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def append(self, step, lam, loss_val, loss_trn, lambda_update_norm, elapsed_seconds, p=None):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("record steps must be strictly increasing")
        lam = np.array(lam, dtype=float)
        if lam.shape != (self.dim_lambda,):
            raise ValueError("lambda has the wrong dimension")
        if self.with_mixture and p is None:
            raise ValueError("mixture record rows need p")
        self.rows.append(
            dict(
                step=int(step),
                lam=lam,
                p=None if p is None else np.array(p, dtype=float),
                loss_val=float(loss_val),
                loss_trn=float(loss_trn),
                lambda_update_norm=float(lambda_update_norm),
                elapsed_seconds=float(elapsed_seconds),
            )
        )

    def __len__(self):
        return len(self.rows)

    @property
    def columns(self):
        cols = ["step"] + [f"lambda_{i}" for i in range(self.dim_lambda)]
        if self.with_mixture:
            cols += [f"p_{i}" for i in range(self.dim_lambda)]
        return cols + ["loss_val", "loss_trn", "lambda_update_norm", "elapsed_seconds"]

    def column(self, name) -> np.ndarray:
        if name in ("step", "loss_val", "loss_trn", "lambda_update_norm", "elapsed_seconds"):
            return np.array([r[name] for r in self.rows])
        if name in ("lam", "p"):
            return np.array([r[name] for r in self.rows])
        raise KeyError(name)

    def to_csv(self, path, wallclock=False) -> Path:
        """Write the trajectory.

        Unless ``wallclock`` is set, ``elapsed_seconds`` is written as 0 so that
        identical runs produce byte-identical files.
        """
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for r in self.rows:
                line = [r["step"]] + [fmt17(v) for v in r["lam"]]
                if self.with_mixture:
                    line += [fmt17(v) for v in r["p"]]
                line += [fmt17(r["loss_val"]), fmt17(r["loss_trn"]), fmt17(r["lambda_update_norm"])]
                line.append(fmt17(r["elapsed_seconds"] if wallclock else 0.0))
                writer.writerow(line)
        return path

    @classmethod
    def from_csv(cls, path) -> "RunRecord":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
        m = sum(1 for h in header if h.startswith("lambda_") and h != "lambda_update_norm")
        with_p = any(h.startswith("p_") for h in header)
        rec = cls(m, with_mixture=with_p)
        for r in rows:
            vals = [float(v) for v in r]
            lam = vals[1:1 + m]
            off = 1 + m
            p = None
            if with_p:
                p = vals[off:off + m]
                off += m
            rec.append(int(vals[0]), lam, *vals[off:off + 4], p=p)
        return rec
