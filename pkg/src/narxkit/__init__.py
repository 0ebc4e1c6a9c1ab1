"""Grey-box NARX/NARMAX polynomial system identification toolkit.

Submodules follow the identification workflow: ``dataset`` (testing and
data preparation), ``structure`` (regressors and term clusters),
``selection`` (forward structure selection), ``estimators`` (LS/WLS/CLS,
extended LS, multi-objective), ``dynamics`` (simulation, fixed points,
static curves, hysteresis), ``greybox`` (auxiliary information as
constraints), ``validation`` (residual tests, free-run metrics, Pareto
picking) and ``cli``/``pipeline`` (the batch front end).
"""

from . import (
    dataset,
    dynamics,
    estimators,
    greybox,
    selection,
    structure,
    validation,
)

__version__ = "0.1.0"

__all__ = [
    "dataset",
    "dynamics",
    "estimators",
    "greybox",
    "selection",
    "structure",
    "validation",
    "__version__",
]
