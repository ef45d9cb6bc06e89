"""Gradient compression for distributed SGD: one-bit dithered quantization
after a randomized fast Walsh-Hadamard flattening, a byte-exact wire format,
and an in-process parameter-server simulator with exact bit accounting.
"""

from .codec import (
    EncodedGradient,
    decode,
    deserialize,
    deserialize_block,
    encode,
    padded_dim,
    payload_bits,
    serialize,
    serialize_block,
    z_transform,
)
from .oracle import (
    FULL_GRADIENT,
    LEAST_SQUARES_MINIBATCH,
    ONE_SPARSE_SEPARABLE,
    LeastSquaresProblem,
    OracleSpec,
    ShiftedQuadratic,
    TrustRegionError,
    estimate_sigma_sq,
    full_gradient,
    load_least_squares,
    objective,
    sample_gradient,
    sample_gradients,
    sample_one_sparse,
    synthetic_least_squares,
)
from .quantizer import (
    DitherConfig,
    FormatError,
    PreconditionError,
    QuantizedVector,
    expected_quantizer_output,
    pack_levels,
    quantize,
    quantizer_mse,
    sign_pm1,
    unpack_levels,
)
from .simulator import (
    ProblemStats,
    QuadCosine,
    RunConfig,
    Trace,
    UnsupportedScheduleError,
    predicted_convex_bound,
    read_trace_csv,
    run,
    run_distributed_sgd,
    run_fo_sgd,
    run_nonconvex,
    run_signsgd,
)
from .transform import (
    DimensionError,
    RandomizedBasis,
    apply,
    apply_inverse,
    fwht_inplace,
    fwht_normalized,
    sample_basis,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "DitherConfig",
    "EncodedGradient",
    "FormatError",
    "FULL_GRADIENT",
    "LEAST_SQUARES_MINIBATCH",
    "LeastSquaresProblem",
    "ONE_SPARSE_SEPARABLE",
    "OracleSpec",
    "PreconditionError",
    "ProblemStats",
    "QuadCosine",
    "QuantizedVector",
    "RandomizedBasis",
    "RunConfig",
    "ShiftedQuadratic",
    "Trace",
    "TrustRegionError",
    "UnsupportedScheduleError",
    "apply",
    "apply_inverse",
    "decode",
    "deserialize",
    "deserialize_block",
    "encode",
    "estimate_sigma_sq",
    "full_gradient",
    "expected_quantizer_output",
    "fwht_inplace",
    "fwht_normalized",
    "load_least_squares",
    "objective",
    "pack_levels",
    "padded_dim",
    "payload_bits",
    "predicted_convex_bound",
    "quantize",
    "quantizer_mse",
    "read_trace_csv",
    "run",
    "run_distributed_sgd",
    "run_fo_sgd",
    "run_nonconvex",
    "run_signsgd",
    "sample_basis",
    "sample_gradient",
    "sample_gradients",
    "sample_one_sparse",
    "serialize",
    "serialize_block",
    "sign_pm1",
    "synthetic_least_squares",
    "unpack_levels",
    "z_transform",
]
