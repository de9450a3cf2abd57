"""Nearly-block-diagonal matrices: representation, stabilization, algebra."""
from .algebra import inverse_update, mul_first_order, select_update_form, sym_product_first_order
from .counts import storage_count
from .eigen import DegenerateSpectrumWarning, EigenPerturbation, perturb_eigen, spectral_first_order
from .stabilize import (
    STABILIZERS,
    DenseCovariance,
    InverseFactor,
    StabilizedFactor,
    cross_term,
    first_order_inverse,
    inv_first_order,
    invert_factor,
    redecompose,
    spectral_stabilize,
    stabilize,
    t1_stabilize,
    t2_stabilize,
    tb_stabilize,
)
from .structure import (
    AsymmetricError,
    BandProfile,
    BlockStructure,
    NbdError,
    NbdMatrix,
    NotPositiveDefiniteError,
    StructureMismatchError,
    lower_block_part,
)

__all__ = [
    "AsymmetricError", "BandProfile", "BlockStructure", "DegenerateSpectrumWarning",
    "DenseCovariance", "EigenPerturbation", "InverseFactor", "NbdError", "NbdMatrix",
    "NotPositiveDefiniteError", "STABILIZERS", "StabilizedFactor", "StructureMismatchError",
    "cross_term", "first_order_inverse", "inv_first_order", "inverse_update", "invert_factor",
    "lower_block_part", "mul_first_order", "perturb_eigen", "redecompose", "select_update_form",
    "spectral_first_order", "spectral_stabilize", "stabilize", "storage_count",
    "sym_product_first_order", "t1_stabilize", "t2_stabilize", "tb_stabilize",
]
