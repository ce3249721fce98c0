"""Retrieval-augmented time series forecasting toolkit."""
from .core import (
    FREQUENCY_CONFIGS,
    Frequency,
    FrequencyConfig,
    MetricTriple,
    Series,
    frequency_config,
    mase,
    naive2_forecast,
    owa,
    smape,
    znormalize,
)
from .dtw import DtwResult, RetrievalResult, dtw, dtw_brute_force, retrieve_top_k
from .errors import BackendError, DataError, KBFormatError, UnparsableResponse
from .evaluation import Corpus, EvaluationReport, evaluate, generate_synthetic_corpus, load_m4_csv
from .forecasting import (
    BackendConfig,
    BackendKind,
    Forecast,
    Forecaster,
    ForecastTask,
    build_prompt,
    forecast,
    parse_response,
)
from .knowledge_base import (
    KBConfig,
    KnowledgeBase,
    Segment,
    build_kb,
    kmeans_cluster,
    load_kb,
    save_kb,
    select_representatives,
    slice_series,
)

__version__ = "0.1.0"
