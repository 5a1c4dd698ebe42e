#!/usr/bin/env python3
"""
Shared Exception Root

Every domain error raised by the engine derives from EngineError so the
command line layer can tell domain failures (exit code 1) apart from
programming errors. The concrete classes live next to the code that
raises them.
"""


class EngineError(Exception):
    """Base class for all domain errors raised by the engine"""
    pass


class ConfigurationError(EngineError):
    """Raised when there's an error in configuration"""
    pass
