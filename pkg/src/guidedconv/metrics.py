"""Depth completion error metrics over the ground-truth validity mask.

Depths are given in meters (or millimeters with ``unit="mm"``).  RMSE/MAE are
reported in millimeters, iRMSE/iMAE in 1/km, REL is unitless and the
threshold accuracies delta_i are percentages of pixels with
max(pred/gt, gt/pred) < 1.25**i (strict inequality).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

CLAMP_EPS_M = 1e-3
FIELDS = ("rmse_mm", "mae_mm", "irmse_per_km", "imae_per_km", "rmse_m", "rel",
          "delta_1", "delta_2", "delta_3", "n_pixels", "n_clamped")


@dataclass
class MetricReport:
    rmse_mm: float
    mae_mm: float
    irmse_per_km: float
    imae_per_km: float
    rmse_m: float
    rel: float
    delta_1: float
    delta_2: float
    delta_3: float
    n_pixels: int
    n_clamped: int = 0

    def to_text(self):
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in FIELDS)

    def to_json(self):
        d = asdict(self)
        return json.dumps({
            "errors": {"rmse_mm": d["rmse_mm"], "mae_mm": d["mae_mm"], "rmse_m": d["rmse_m"], "rel": d["rel"]},
            "inverse": {"irmse_per_km": d["irmse_per_km"], "imae_per_km": d["imae_per_km"]},
            "thresholds": {"delta_1": d["delta_1"], "delta_2": d["delta_2"], "delta_3": d["delta_3"]},
            "counts": {"n_pixels": d["n_pixels"], "n_clamped": d["n_clamped"]},
        }, indent=2, sort_keys=True)

    @classmethod
    def from_text(cls, text):
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(**{k: (int(kv[k]) if k.startswith("n_") else float(kv[k])) for k in FIELDS})


def evaluate(pred, gt, mask=None, unit="m", eps=CLAMP_EPS_M):
    """Compare predicted and ground-truth depth on ``mask`` (default: gt > 0).

    Predictions at or below ``eps`` meters are clamped to ``eps`` for every
    metric and counted in ``n_clamped``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if mask is None:
        mask = gt > 0
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != gt.shape:
        raise ValueError(f"mask shape {mask.shape} != ground truth shape {gt.shape}")
    if not mask.any():
        raise ValueError("empty validity mask")
    to_m = {"m": 1.0, "mm": 1e-3}[unit]
    d = pred[mask]
    g = gt[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on the mask")
    eps_u = eps / to_m
    low = d <= eps_u
    n_clamped = int(low.sum())
    d = np.where(low, eps_u, d)

    # linear errors in the input unit, so a mm offset yields an exact mm error
    err = d - g
    rmse_u = float(np.sqrt(np.mean(err * err)))
    mae_u = float(np.mean(np.abs(err)))
    if unit == "mm":
        rmse_mm, mae_mm = rmse_u, mae_u
        rmse_m = rmse_mm / 1000.0
    else:
        rmse_m = rmse_u
        rmse_mm, mae_mm = 1000.0 * rmse_u, 1000.0 * mae_u
    ierr = 1.0 / (d * to_m) - 1.0 / (g * to_m)
    irmse = float(np.sqrt(np.mean(ierr * ierr)))
    imae = float(np.mean(np.abs(ierr)))
    rel = float(np.mean(np.abs(err) / g))
    ratio = np.maximum(d / g, g / d)
    deltas = [float(100.0 * np.mean(ratio < 1.25 ** i)) for i in (1, 2, 3)]
    return MetricReport(
        rmse_mm=rmse_mm, mae_mm=mae_mm,
        irmse_per_km=1000.0 * irmse, imae_per_km=1000.0 * imae,
        rmse_m=rmse_m, rel=rel,
        delta_1=deltas[0], delta_2=deltas[1], delta_3=deltas[2],
        n_pixels=int(mask.sum()), n_clamped=n_clamped)
