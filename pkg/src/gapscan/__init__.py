"""Hard-label black-box backdoor scanner.

The scanner reconstructs per-label adversarial perturbation maps through a
hard-label query interface, scores each label by the summed extreme values of
those maps, and flags outliers with a robust median-based test.
"""

from .core import (
    BankConstructionError,
    CallableOracle,
    GapScanError,
    HardLabelOracle,
    QueryBudgetExceededError,
    SampleBank,
    ScopedBudgetOracle,
    ShapeMismatchError,
    TriggerSpec,
    apply_trigger,
    build_sample_bank,
    validate_input,
    with_budget,
)

__version__ = "0.1.0"

__all__ = [
    "BankConstructionError",
    "CallableOracle",
    "GapScanError",
    "HardLabelOracle",
    "QueryBudgetExceededError",
    "SampleBank",
    "ScopedBudgetOracle",
    "ShapeMismatchError",
    "TriggerSpec",
    "apply_trigger",
    "build_sample_bank",
    "validate_input",
    "with_budget",
    "__version__",
]
