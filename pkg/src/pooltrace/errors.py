"""Exception hierarchy shared by all pooltrace modules."""


class PoolError(Exception):
    """Base class for every error raised by pooltrace."""


# crypto
class CryptoError(PoolError):
    pass


class AuthenticationFailure(CryptoError):
    """Authenticated decryption rejected the ciphertext (tampered data or wrong key)."""


class VerificationError(CryptoError):
    """A signature or public key is malformed."""


class UnwrapFailure(CryptoError):
    """A wrapped key could not be opened with the given private key."""


# secret sharing
class SharingError(PoolError):
    pass


class InvalidPoolSize(SharingError):
    pass


class InsufficientShares(SharingError):
    pass


class VersionMismatch(SharingError):
    pass


class DuplicateIndex(SharingError):
    pass


class ReconstructionImpossible(SharingError):
    def __init__(self, message, bad_indices=()):
        super().__init__(message)
        self.bad_indices = tuple(bad_indices)


class MissingDigest(SharingError):
    pass


# messaging
class MessagingError(PoolError):
    pass


class ParseError(MessagingError):
    pass


class NotRecipient(MessagingError):
    """The opening node is neither sender nor listed receiver of a sealed envelope."""


class ForgedMessage(MessagingError):
    pass


class CorruptWrappedKey(MessagingError):
    pass


# ledger
class LedgerError(PoolError):
    pass


class EmptyMessage(LedgerError):
    pass


class InvalidHeight(LedgerError):
    pass


# block store
class BlockStoreError(PoolError):
    pass


class EmptyFile(BlockStoreError):
    pass


class InsufficientPeers(BlockStoreError):
    pass


class Unavailable(BlockStoreError):
    pass


# pool node
class NodeError(PoolError):
    pass


class NotAuthorized(NodeError):
    pass


class UnknownFile(NodeError):
    pass


# audit
class AuditError(PoolError):
    pass


class ReplayError(AuditError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class EvidenceIncomplete(AuditError):
    pass


class UnknownAccess(AuditError):
    pass


# simulator
class ConfigError(PoolError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
