"""Random-forest regression with CART splits, a population oracle and bound checks."""
__version__ = "0.1.0"

from .geometry import Cell, GridConfig, InvalidSplitError, Split, cell_contains, snap_to_grid, split_cell  # noqa: E402
from .data import Dataset, generate_sample, load_csv  # noqa: E402
from .models import REGISTRY, RegressionModel, eval_model, make_model, user_model  # noqa: E402

__all__ = ["Cell", "GridConfig", "InvalidSplitError", "Split", "cell_contains", "snap_to_grid",
           "split_cell", "Dataset", "generate_sample", "load_csv", "REGISTRY", "RegressionModel",
           "eval_model", "make_model", "user_model"]
