"""Evaluation metrics for individual treatment effect predictions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, CoverageWarning, ValidationError


@dataclass(frozen=True)
class ItePredictions:
    """Predicted potential outcomes per evaluated unit."""

    y1_hat: np.ndarray
    y0_hat: np.ndarray

    def __post_init__(self):
        y1 = np.asarray(self.y1_hat, dtype=float).ravel()
        y0 = np.asarray(self.y0_hat, dtype=float).ravel()
        object.__setattr__(self, "y1_hat", y1)
        object.__setattr__(self, "y0_hat", y0)
        if len(y1) != len(y0):
            raise AlignmentError("predicted arms must be aligned")
        if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y0))):
            raise ValidationError("predictions contain non-finite values")

    def ite(self) -> np.ndarray:
        return self.y1_hat - self.y0_hat


def _check_aligned(pred: ItePredictions, true_ite) -> np.ndarray:
    if hasattr(true_ite, "ite"):
        true_ite = true_ite.ite()
    true_ite = np.asarray(true_ite, dtype=float).ravel()
    if len(true_ite) != len(pred.y1_hat):
        raise AlignmentError("predictions and ground truth must be aligned")
    if len(true_ite) == 0:
        raise ValidationError("metric over an empty unit set")
    return true_ite


def pehe(pred: ItePredictions, true_ite) -> float:
    """Mean squared error of predicted individual effects.

    Callers report the square root; this returns the mean of squares.
    """
    true_ite = _check_aligned(pred, true_ite)
    diff = pred.ite() - true_ite
    return float(np.mean(diff * diff))


def ate_error(pred: ItePredictions, true_ite) -> float:
    """Absolute error of the average effect; signed unit errors may cancel."""
    true_ite = _check_aligned(pred, true_ite)
    return float(abs(np.mean(pred.ite() - true_ite)))


def att_error(
    pred: ItePredictions,
    treated_outcomes,
    control_randomized_outcomes,
    treated_index,
) -> float:
    """|ATT - mean predicted effect over the treated|.

    ATT is the difference of mean observed outcomes between the treated set
    and the randomized control set (in absolute value); usable when one
    potential outcome is never observed but a randomized subsample exists.
    """
    treated_outcomes = np.asarray(treated_outcomes, dtype=float).ravel()
    control = np.asarray(control_randomized_outcomes, dtype=float).ravel()
    treated_index = np.asarray(treated_index)
    if len(treated_outcomes) == 0 or len(control) == 0:
        raise ValidationError("ATT needs non-empty treated and control-randomized sets")
    att = abs(float(np.mean(treated_outcomes)) - float(np.mean(control)))
    ite_t = pred.ite()[treated_index]
    if len(ite_t) == 0:
        raise ValidationError("no predictions over the treated set")
    return float(abs(att - np.mean(ite_t)))


def policy_risk(pred: ItePredictions, treatments, outcomes) -> float:
    """Risk of the policy that treats whenever the predicted effect is positive.

    1 - [ E[Y | recommend 1, X=1] P(recommend 1)
        + E[Y | recommend 0, X=0] P(recommend 0) ]

    computed over the supplied (randomized) evaluation rows. A tie
    (predicted effect exactly zero) recommends 0. An empty conditioning cell
    contributes zero and raises a CoverageWarning.
    """
    treatments = np.asarray(treatments, dtype=float).ravel()
    outcomes = np.asarray(outcomes, dtype=float).ravel()
    if len(treatments) != len(pred.y1_hat) or len(outcomes) != len(pred.y1_hat):
        raise AlignmentError("treatments/outcomes must align with predictions")
    if len(treatments) == 0:
        raise ValidationError("policy risk over an empty evaluation set")
    recommend = pred.ite() > 0.0
    p_treat = float(np.mean(recommend))
    value = 0.0
    for rec_mask, arm, share in (
        (recommend, 1.0, p_treat),
        (~recommend, 0.0, 1.0 - p_treat),
    ):
        cell = rec_mask & (treatments == arm)
        if np.any(cell):
            value += float(np.mean(outcomes[cell])) * share
        elif share > 0:
            warnings.warn(
                f"no units with X={int(arm)} under the recommended-{int(arm)} cell; "
                "that term contributes zero",
                CoverageWarning,
                stacklevel=2,
            )
    return 1.0 - value
