"""Projected intrinsic conditional autoregression (PICAR) for spatial GLMMs."""

__version__ = "0.1.0"

from .estimator import PICAR, MoranBasisTransformer  # noqa: E402

__all__ = ["PICAR", "MoranBasisTransformer", "__version__"]
