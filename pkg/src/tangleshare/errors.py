"""Exception hierarchy shared by every module.

Everything raised on purpose derives from :class:`TangleShareError`, which lets
the CLI map domain failures to exit code 1.
"""


class TangleShareError(Exception):
    """Base class for all domain errors."""


# ledger
class LedgerError(TangleShareError):
    pass


class PayloadTooLarge(LedgerError):
    pass


# mam
class MamError(TangleShareError):
    pass


class MissingFeatureName(MamError):
    pass


class WrongChannelKind(MamError):
    pass


class AuthFailure(MamError):
    """A message failed MAC, signature or chain verification."""


# store
class StoreError(TangleShareError):
    pass


class NotFound(StoreError):
    pass


class IntegrityFailure(StoreError):
    pass


class InvalidTopic(StoreError):
    pass


# contracts
class ContractError(TangleShareError):
    pass


class UnknownAccount(ContractError):
    pass


class DuplicateRegistration(ContractError):
    pass


class InsufficientFunds(ContractError):
    pass


class UnknownBundle(ContractError):
    pass


class UnknownContract(ContractError):
    pass


class AlreadyGranted(ContractError):
    pass


class NotAuthorized(ContractError):
    pass


class UnknownChannel(ContractError):
    pass


class ExceedsDeposit(ContractError):
    pass


class InvalidProof(ContractError):
    pass


class ChallengeExpired(ContractError):
    pass


class AlreadySettled(ContractError):
    pass


class ChallengeOpen(ContractError):
    """The payer-initiated close is still inside its challenge window."""


# authsvc
class AuthServiceError(TangleShareError):
    pass


class BadSignature(AuthServiceError):
    pass


class AccessDenied(AuthServiceError):
    pass


class UnknownItem(AuthServiceError):
    pass


# pol
class PolError(TangleShareError):
    pass


class UnregisteredDevice(PolError):
    pass


class UnknownDevice(PolError):
    pass


class AreaTooLarge(PolError):
    pass


class OutsideArea(PolError):
    pass


# simbench
class SimError(TangleShareError):
    pass


class EmptyInput(SimError):
    def __init__(self, message: str = "no accepted records", acceptance_rate: float = 0.0):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate


class ConfigError(SimError):
    pass
