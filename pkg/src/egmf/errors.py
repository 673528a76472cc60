"""Exception types shared across the package."""


class NumericalAbort(FloatingPointError):
    """A state or field became non-finite; the run cannot continue.

    ``context`` carries whatever diagnostic record the raiser has (member
    index, substep, time).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class IntegrationBlowup(NumericalAbort):
    pass


class EMFailure(NumericalAbort):
    pass


class ConfigError(ValueError):
    pass
