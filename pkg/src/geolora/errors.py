"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller violated a shape, range or mode contract."""


class NumericFailure(ArithmeticError):
    """Non-finite values appeared during an optimizer stage.

    ``iteration``, ``stage`` and ``layer`` locate the failure so that
    trajectory logs can record where a run blew up.
    """

    def __init__(self, message, *, iteration=None, stage=None, layer=None):
        self.iteration = iteration
        self.stage = stage
        self.layer = layer
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if layer is not None:
            where.append(f"layer {layer}")
        if stage is not None:
            where.append(f"stage {stage}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)

    def located(self, *, iteration=None, stage=None, layer=None):
        """Return a copy with missing location fields filled in."""
        base = str(self.args[0]).split(" (", 1)[0]
        return NumericFailure(
            base,
            iteration=self.iteration if self.iteration is not None else iteration,
            stage=self.stage if self.stage is not None else stage,
            layer=self.layer if self.layer is not None else layer,
        )


class ConfigError(InvalidArgument):
    """Experiment configuration failed validation; ``errors`` lists each field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))
