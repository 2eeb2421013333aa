"""Exceptions raised by nosekit.

Every class derives from the builtin a caller would naturally catch, so
``except ValueError`` keeps working around data and config problems.
"""
from typing import Optional, Sequence

__all__ = ['NosekitError', 'ConfigError', 'DataError', 'CsvFormatError',
           'UnknownNameError', 'InvalidTargetError', 'SplitError', 'FitError',
           'EmptySpectrumError', 'CoverageError', 'NumericError']


class NosekitError(Exception):
    """The base class of all nosekit errors.

    :cvar exit_code: The process exit code used by the command line tool.
    """
    exit_code = 1


class ConfigError(NosekitError, ValueError):
    """An invalid experiment configuration.

    :param message: What is wrong.
    :param field: The ``section.key`` path of the offending field, if any.
    """
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        self.field = field
        super().__init__(f'{field}: {message}' if field else message)


class DataError(NosekitError, ValueError):
    """Invalid or missing input data."""
    exit_code = 3


class CsvFormatError(DataError):
    """A malformed sensor CSV file.

    :param path: The file being parsed.
    :param line: The 1-based line number in the file, header is line 1.
    :param message: What is wrong.
    """
    def __init__(self, path, line: Optional[int], message: str) -> None:
        self.path = path
        self.line = line
        where = f'{path}:{line}' if line is not None else f'{path}'
        super().__init__(f'{where}: {message}')


class UnknownNameError(DataError, LookupError):
    """A substance or odorant name not in the registry."""
    def __init__(self, name: str, suggestions: Sequence[str] = ()) -> None:
        self.name = name
        self.suggestions = list(suggestions)
        hint = f', did you mean {", ".join(self.suggestions)}?' if self.suggestions else ''
        super().__init__(f'unknown substance {name!r}{hint}')


class InvalidTargetError(DataError):
    """A raw mixture vector that cannot be normalized into a target."""


class SplitError(DataError):
    """A split policy that cannot be applied to a dataset."""


class FitError(DataError):
    """Statistics that cannot be fitted, e.g. a zero-variance channel."""


class EmptySpectrumError(DataError):
    """A mass spectrum with no usable peak inside the binning range."""


class CoverageError(DataError):
    """An ingredient without any usable GC-MS spectrum."""


class NumericError(NosekitError, ArithmeticError):
    """A non-finite value during training.

    :param message: What happened.
    :param epoch: The 1-based epoch, if known.
    :param step: The 1-based step inside the epoch, if known.
    """
    exit_code = 4

    def __init__(self, message: str, epoch: Optional[int] = None,
                 step: Optional[int] = None) -> None:
        self.epoch = epoch
        self.step = step
        where = f' at epoch {epoch} step {step}' if epoch is not None else ''
        super().__init__(message + where)


import unittest

class TestErrors(unittest.TestCase):
    def test_hierarchy(self):
        self.assertTrue(issubclass(CsvFormatError, ValueError))
        self.assertTrue(issubclass(UnknownNameError, LookupError))
        self.assertTrue(issubclass(NumericError, ArithmeticError))
        self.assertEqual(ConfigError('x').exit_code, 2)
        self.assertEqual(FitError('x').exit_code, 3)
        self.assertEqual(NumericError('x').exit_code, 4)

    def test_messages(self):
        self.assertIn('optim.lr', str(ConfigError('bad value', 'optim.lr')))
        self.assertIn('a.csv:17', str(CsvFormatError('a.csv', 17, 'non-finite')))
        err = UnknownNameError('cashw', ['cashew'])
        self.assertIn('cashew', str(err))
        self.assertIn('epoch 3 step 7', str(NumericError('nan loss', 3, 7)))


if __name__ == '__main__':
    unittest.main(argv=['first-arg-is-ignored'], exit=False)
