"""Truncated Hopf algebras, rough paths and rough differential equations driven by them."""

from __future__ import annotations

from .controlled_path import ControlledPath, compose_smooth, make_field, transported_path
from .controls import Control, holder_control, pvar_control
from .hopf_core import Algebra, build_algebra
from .integration import integral_controlled, rrs_integral
from .rde import RdeProblem, solve_global, solve_local
from .rough_path import branched_lift, jump_lift, pure_area_lift, signature_lift

__version__ = "0.1.0"

__all__ = [
    "Algebra", "Control", "ControlledPath", "RdeProblem", "branched_lift", "build_algebra", "compose_smooth",
    "holder_control", "integral_controlled", "jump_lift", "make_field", "pure_area_lift", "pvar_control",
    "rrs_integral", "signature_lift", "solve_global", "solve_local", "transported_path",
]
