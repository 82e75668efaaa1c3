"""Knowledge distillation and transfer-learned error correction for turbine power forecasts."""
__version__ = "0.1.0"

from .models import BiLSTMRegressor, EDLSTMRegressor, TLNetRegressor

__all__ = ["BiLSTMRegressor", "EDLSTMRegressor", "TLNetRegressor", "__version__"]
