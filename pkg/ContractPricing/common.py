import logging
import os

import numpy as np

formatter = logging.Formatter('[%(asctime)s] [%(name)s] [%(levelname)s] %(message)s')


def get_logger(name, level=logging.DEBUG):
    logger = logging.getLogger(name)
    logger.handlers.clear()
    logger.setLevel(level)
    ch = logging.StreamHandler()
    ch.setLevel(logging.INFO)
    ch.setFormatter(formatter)
    logger.addHandler(ch)
    logger.propagate = False
    return logger


def add_filehandler(logger, filepath):
    fh = logging.FileHandler(filepath)
    fh.setLevel(logging.DEBUG)
    fh.setFormatter(formatter)
    logger.addHandler(fh)
    return fh


def progress_disabled(verbose=True):
    # no progress bars on batch hosts
    return (not verbose) or bool(os.environ.get('TASK_NAME', ''))


def rng_with_seed(seed, *stream):
    """Independent generator per (seed, stream ids); identical inputs give identical draws."""
    return np.random.default_rng([int(seed)] + [int(s) for s in stream])


class ContractPricingError(Exception):
    pass


class ScenarioParseError(ContractPricingError):
    def __init__(self, path, line, column, problem):
        self.path, self.line, self.column = path, line, column
        super().__init__(f'{path}:{line}:{column}: {problem}')


class ScenarioValidationError(ContractPricingError):
    def __init__(self, field, problem):
        self.field = field
        super().__init__(f'{field}: {problem}')


class ContractViolation(ContractPricingError):
    pass


class InfeasiblePeriodError(ContractPricingError):
    def __init__(self, period, solution=None):
        self.period = period
        self.solution = solution
        super().__init__(f'DisCo problem infeasible in period {period} (demand exceeds deliverable power)')


class SolverFailure(ContractPricingError):
    def __init__(self, what, solution):
        self.solution = solution
        super().__init__(f'{what}: solver stopped with status {solution.status} after {solution.iters} iterations')


class EquilibriumNotFound(ContractPricingError):
    def __init__(self, best, c_pen):
        self.best = best
        self.c_pen = c_pen
        super().__init__(f'no attempt accepted; best c_pen={c_pen:.3e}')


class ReconstructionError(ContractPricingError):
    def __init__(self, period, problem):
        self.period = period
        super().__init__(f'period {period}: {problem}')
