"""Set-equivariant layers with population pooling, plus amortized clustering benchmarks."""

from swarmset.autodiff import (
    FLOAT32,
    FLOAT64,
    CardinalityError,
    Node,
    PopulationBatch,
    ShapeError,
    backward,
    no_grad,
)

__all__ = [
    "FLOAT32",
    "FLOAT64",
    "CardinalityError",
    "Node",
    "PopulationBatch",
    "ShapeError",
    "backward",
    "no_grad",
]

__version__ = "0.1.0"
