"""Exception hierarchy. Each family maps to one CLI exit code."""


class EngineError(Exception):
    exit_code = 1


class ConfigError(EngineError):
    """Invalid experiment configuration, located by section and key when known."""

    def __init__(self, message, section=None, key=None):
        self.section = section
        self.key = key
        where = ""
        if section is not None:
            where = f"[{section}]"
            if key is not None:
                where += f" {key}"
            where += ": "
        super().__init__(where + message)


class DSLError(ConfigError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", column {column}"
            loc += ": "
        super().__init__(loc + message, section="model", key="model")


class DimensionError(DSLError):
    pass


class DataError(EngineError):
    exit_code = 2


class ArchiveError(DataError):
    pass


class NumericError(EngineError):
    exit_code = 3


class CheckpointError(DataError):
    pass
