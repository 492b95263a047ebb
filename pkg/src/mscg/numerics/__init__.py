from . import ops
from .autodiff import ContractError, Var, as_var, backward, param
from .rng import RngState

__all__ = ["ContractError", "RngState", "Var", "as_var", "backward", "ops", "param"]
