"""Normalizing-flow transports with hand-written reverse-mode gradients."""

from .affine import DiagAffineFlow, forward_diag_affine
from .base import Flow, FlowDomainError, FlowOutput, FlowParams, IdentityFlow
from .iaf import AffineIAFFlow, forward_affine_iaf, made_masks
from .loss import loss_and_grad, loss_terms, weighted_loss
from .spline import RQSplineFlow, forward_rq_spline_mf

FAMILIES = ("identity", "diag_affine", "rq_spline_mf", "affine_iaf")


def make_flow(family: str, dim: int, **options) -> Flow:
    """Build a flow architecture by family tag.

    ``options`` are passed to the family constructor (e.g. ``hidden_per_dim``
    and ``negative_slope`` for ``affine_iaf``, ``num_bins`` for the spline).
    """
    if family == "identity":
        return IdentityFlow(dim)
    if family == "diag_affine":
        return DiagAffineFlow(dim)
    if family == "rq_spline_mf":
        return RQSplineFlow(dim, **options)
    if family == "affine_iaf":
        return AffineIAFFlow(dim, **options)
    raise ValueError(f"unknown flow family {family!r}; expected one of {FAMILIES}")


def forward(flow: Flow, params: FlowParams, x) -> FlowOutput:
    return flow.forward(params, x)


__all__ = [
    "AffineIAFFlow", "DiagAffineFlow", "FAMILIES", "Flow", "FlowDomainError", "FlowOutput",
    "FlowParams", "IdentityFlow", "RQSplineFlow", "forward", "forward_affine_iaf",
    "forward_diag_affine", "forward_rq_spline_mf", "loss_and_grad", "loss_terms",
    "made_masks", "make_flow", "weighted_loss",
]
