"""
shared/errors.py
────────────────
Exception hierarchy for the transport toolkit.

Every error carries an ``exit_code`` so the CLI can map a failure to the
documented process status without inspecting messages:

    0  success
    2  validation failure (structure axioms, unvalidated input, domain errors)
    3  solver non-convergence
    4  scenario schema error
"""


class QmsError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 2


# ─── Matrix / functional-calculus domain errors ──────────────────────────────

class NotHermitianError(QmsError):
    """Input declared self-adjoint is not Hermitian to tolerance."""


class SingularStateError(QmsError):
    """A density matrix that must be invertible has a zero eigenvalue."""


class MeanDomainError(QmsError):
    """A mean function is undefined on a spectral pair."""


class MembershipError(QmsError):
    """Matrix does not lie in the algebra."""


class NonUnitalMapError(QmsError):
    """Superoperator expected to be unital is not."""


class TreeShapeError(QmsError):
    """Unsupported tree shape for a second-order divided difference."""


class ChannelError(QmsError):
    """Kraus family is not trace preserving to tolerance."""


# ─── Structures ──────────────────────────────────────────────────────────────

class StructureError(QmsError):
    """Builder inputs or an explicit structure violate a structural axiom."""


class UnvalidatedStructureError(StructureError):
    """Operation requires a structure that passed validate_structure."""

    def __init__(self, message="unvalidated structure"):
        super().__init__(message)


class ErgodicityError(StructureError):
    """Operation requires dim Ker(L) = 1."""


# ─── Transport ───────────────────────────────────────────────────────────────

class RangeError(QmsError):
    """Source term is not in the range of the divergence."""


class NotConnectedError(QmsError):
    """Endpoints lie in different components; the distance is infinite."""


class NonConvexThetaError(QmsError):
    """Distance solver was asked to run on a mean not flagged convex."""


class ConvergenceError(QmsError):
    """Iterative solver or integrator stopped before meeting its tolerance."""

    exit_code = 3


# ─── Scenarios ───────────────────────────────────────────────────────────────

class ScenarioError(QmsError):
    """Scenario file could not be parsed into the schema."""

    exit_code = 4
