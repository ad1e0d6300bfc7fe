"""Customer churn as per-customer exponential purchase rates learned by an LSTM."""

__version__ = "0.1.0"
