"""Insider-trading pattern detection over trading-volume series.

Stages: label enforcement releases (:mod:`corpus`, :mod:`textmodel`), cut
anomalous volume windows around learning dates (:mod:`timeseries`), predict
volumes with a recurrent model (:mod:`predictor`), and match signals against
the patterns by normalized cross-correlation (:mod:`anomalous`).
"""

__version__ = "0.1.0"
