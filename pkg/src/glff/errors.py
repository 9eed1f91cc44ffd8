class ConfigError(ValueError):
    """Invalid configuration or arguments; the CLI maps this to exit code 2."""


class PreprocessError(ValueError):
    """Image does not satisfy the model's input contract."""


class NumericError(FloatingPointError):
    """Non-finite values showed up where finite ones are required."""


class EncoderNotFoundError(ConfigError):
    pass
