"""Exception hierarchy.

Every error carries a short machine-parsable ``code`` which the CLI prints on
failure.
"""


class MMRFError(Exception):
    code = "error"


class NonConvergence(MMRFError):
    code = "non_convergence"


class MissesROI(MMRFError):
    code = "misses_roi"


class DegenerateReference(MMRFError):
    code = "degenerate_reference"


class ZeroIntensity(MMRFError):
    code = "zero_intensity"


class ZeroGradient(MMRFError):
    code = "zero_gradient"


class ShapeMismatch(MMRFError, ValueError):
    code = "shape_mismatch"


class EmptyTape(MMRFError):
    code = "empty_tape"


class EmptyBudget(MMRFError):
    code = "empty_budget"


class NonFiniteLoss(MMRFError):
    code = "non_finite_loss"


class MissingFrame(MMRFError):
    code = "missing_frame"


class BitDepthMismatch(MMRFError):
    code = "bit_depth_mismatch"


class PoseCompositionError(MMRFError):
    code = "pose_composition"


class BudgetTooLarge(MMRFError):
    code = "budget_too_large"


class EmptyMask(MMRFError):
    code = "empty_mask"


class InvalidSpec(MMRFError, ValueError):
    code = "invalid_spec"


class CheckpointMismatch(MMRFError):
    code = "checkpoint_mismatch"
