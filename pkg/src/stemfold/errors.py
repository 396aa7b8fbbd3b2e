"""Exception types shared across the package. The CLI maps these onto exit
codes (invalid arguments -> 2, data/fingerprint mismatches -> 3, numerical
divergence -> 4)."""


class NumericalOverflow(ArithmeticError):
    """A numerical computation produced a non-finite value."""


class SimulationDiverged(NumericalOverflow):
    """The physics integrator left the finite range; message carries the step."""


class TrainingDiverged(NumericalOverflow):
    """The training loss became NaN/inf; message carries the step."""


class AgentUnobservable(ValueError):
    """An agent has no observation inside the encoder window."""


class FingerprintError(RuntimeError):
    """Checkpoint and dataset (or manifest) do not belong together."""
