class GraphFormatError(ValueError):
    """A data file line could not be parsed."""

    def __init__(self, path, lineno, line, reason="malformed line"):
        self.path = str(path)
        self.lineno = lineno
        self.line = line
        super().__init__(f"{self.path}:{lineno}: {reason}: {line!r}")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration, loss):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")


class ConfigError(ValueError):
    pass
