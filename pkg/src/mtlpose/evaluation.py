"""Pose metrics: endpoint-swap-tolerant PCP and the FLIC accuracy curve."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import JOINT_NAMES, PART_NAMES, sticks_from_joints
from .errors import InvalidArgumentError

ALPHA = 0.5
RADII = tuple(range(1, 21))
# head scoring is off by default: its stick definition differs between datasets
DEFAULT_PARTS = PART_NAMES[1:]


def pcp_part(est, gt, alpha: float = ALPHA) -> bool:
    """Is the estimated stick ``est = (e1, e2)`` correct for ``gt = (g1, g2)``?

    Both endpoints must be within ``alpha * |g1 - g2|`` of the ground truth,
    under either endpoint assignment.
    """
    (e1, e2), (g1, g2) = np.asarray(est, float), np.asarray(gt, float)
    length = np.linalg.norm(g1 - g2)
    if length == 0:
        raise InvalidArgumentError("ground-truth part has zero length")
    tol = alpha * length
    d = np.linalg.norm
    return bool((d(e1 - g1) <= tol and d(e2 - g2) <= tol) or (d(e2 - g1) <= tol and d(e1 - g2) <= tol))


def pcp_correct(est_sticks, gt_sticks, alpha: float = ALPHA) -> np.ndarray:
    """Vectorized :func:`pcp_part` over (..., 2, 2) stick arrays. Zero-length gt gives False."""
    e, g = np.asarray(est_sticks, float), np.asarray(gt_sticks, float)
    tol = alpha * np.linalg.norm(g[..., 0, :] - g[..., 1, :], axis=-1)
    d = lambda a, b: np.linalg.norm(a - b, axis=-1)  # noqa: E731
    straight = (d(e[..., 0, :], g[..., 0, :]) <= tol) & (d(e[..., 1, :], g[..., 1, :]) <= tol)
    swapped = (d(e[..., 1, :], g[..., 0, :]) <= tol) & (d(e[..., 0, :], g[..., 1, :]) <= tol)
    return (straight | swapped) & (tol > 0)


@dataclass
class PcpResult:
    percent: dict           # part name -> percentage correct
    alpha: float
    excluded: list = field(default_factory=list)  # parts dropped for zero-length gt
    counts: dict = field(default_factory=dict)

    def csv(self) -> str:
        return "\n".join(["part,pcp_percent"] + [f"{k},{float(v)!r}" for k, v in self.percent.items()]) + "\n"


def pcp_dataset(estimates, truths, alpha: float = ALPHA, parts=DEFAULT_PARTS) -> PcpResult:
    """Per-part PCP over matched (N, 8, 2) joint arrays.

    A part with a zero-length ground truth in any sample is left out of
    ``percent`` and listed in ``excluded`` instead of being scored as 0.
    """
    est, gt = np.asarray(estimates, float), np.asarray(truths, float)
    if est.shape != gt.shape:
        raise InvalidArgumentError(f"estimates {est.shape} and truths {gt.shape} differ in shape")
    if len(est) == 0:
        raise InvalidArgumentError("no samples")
    es, gs = sticks_from_joints(est), sticks_from_joints(gt)
    ok = pcp_correct(es, gs, alpha)
    lengths = np.linalg.norm(gs[..., 0, :] - gs[..., 1, :], axis=-1)
    percent, excluded, counts = {}, [], {}
    for name in parts:
        p = PART_NAMES.index(name)
        if np.any(lengths[:, p] == 0):
            excluded.append(name)
            continue
        counts[name] = int(ok[:, p].sum())
        percent[name] = 100.0 * counts[name] / len(est)
    return PcpResult(percent, alpha, excluded, counts)


@dataclass
class AccuracyCurve:
    radii: tuple
    accuracy: np.ndarray    # (joints, len(radii)) percentages
    excluded: int = 0       # samples dropped for a zero normalizer distance

    def csv(self) -> str:
        lines = ["joint,r,accuracy"]
        for j, name in enumerate(JOINT_NAMES[:len(self.accuracy)]):
            for k, r in enumerate(self.radii):
                lines.append(f"{name},{r},{float(self.accuracy[j, k])!r}")
        return "\n".join(lines) + "\n"

    def at(self, joint: str, r) -> float:
        return float(self.accuracy[JOINT_NAMES.index(joint), list(self.radii).index(r)])


def flic_accuracy(estimates, truths, normalizers, radii=RADII) -> AccuracyCurve:
    """Percentage of samples with ``100 * error / |l_hip - r_shoulder| <= r``.

    Evaluated as ``error <= r * distance / 100`` so that decimal thresholds
    such as an error of 0.07 at r = 7 compare as written.
    """
    if normalizers is None:
        raise InvalidArgumentError("FLIC accuracy needs (l_hip, r_shoulder) normalizer joints")
    est, gt = np.asarray(estimates, float), np.asarray(truths, float)
    norm = np.asarray(normalizers, float)
    if est.shape != gt.shape or len(norm) != len(gt):
        raise InvalidArgumentError("estimates, truths and normalizers must have matching lengths")
    scale = np.linalg.norm(norm[:, 0] - norm[:, 1], axis=-1)
    keep = scale > 0
    excluded = int((~keep).sum())
    est, gt, scale = est[keep], gt[keep], scale[keep]
    radii = tuple(radii)
    if len(gt) == 0:
        return AccuracyCurve(radii, np.full((gt.shape[1], len(radii)), np.nan), excluded)
    err = np.linalg.norm(est - gt, axis=-1)             # (N, J)
    acc = np.empty((gt.shape[1], len(radii)))
    for k, r in enumerate(radii):
        hit = err <= (r * scale / 100)[:, None]
        acc[:, k] = 100.0 * hit.sum(axis=0) / len(gt)
    return AccuracyCurve(radii, acc, excluded)
