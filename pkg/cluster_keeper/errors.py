"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI maps it to.
"""
from typing import Optional, Sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ClusterKeeperError(Exception):
    exit_code = 1

    def context(self) -> dict:
        """Extra fields for structured diagnostics."""
        return {}


class ConfigError(ClusterKeeperError):
    exit_code = EXIT_CONFIG


class DataError(ClusterKeeperError):
    exit_code = EXIT_DATA


class NumericalError(ClusterKeeperError):
    exit_code = EXIT_NUMERICAL


class InvalidInput(NumericalError, ValueError):
    pass


class NotPSD(NumericalError):
    pass


class NotPD(NumericalError):
    pass


class Underdetermined(NumericalError):
    pass


class CollinearFocal(NumericalError):
    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__("focal covariates collinear with fixed effects: " + ", ".join(self.columns))

    def context(self) -> dict:
        return {"columns": self.columns}


class ClusterIdentification(NumericalError):
    def __init__(self, cluster, message: Optional[str] = None):
        self.cluster = cluster
        super().__init__(message or f"coefficients not identified without cluster {cluster!r}")

    def context(self) -> dict:
        return {"cluster": str(self.cluster)}


class ShortcutInvalid(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    pass


class SingularAdjustment(NumericalError):
    pass


class DegreesOfFreedomTooSmall(NumericalError):
    def __init__(self, eta: float, q: int, constraint: Optional[str] = None):
        self.eta = float(eta)
        self.q = int(q)
        self.constraint = constraint
        where = f" for constraint {constraint!r}" if constraint else ""
        super().__init__(f"AHT degrees of freedom {self.eta:.6g} too small for q={self.q}{where}")

    def context(self) -> dict:
        ctx = {"eta": self.eta, "q": self.q}
        if self.constraint:
            ctx["constraint"] = self.constraint
        return ctx


class NumericalWarning(UserWarning):
    """Recoverable numerical notices (dropped columns, clamped estimates, experimental options)."""
