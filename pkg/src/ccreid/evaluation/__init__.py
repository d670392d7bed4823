from .features import extract_features, sample_meta
from .metrics import (PROTOCOLS, ProtocolRule, RetrievalResult, cosine_distance, format_report,
                      get_protocol, score, score_distmat, write_distance_csv)
from .rank import BACKEND

__all__ = [
    "BACKEND", "PROTOCOLS", "ProtocolRule", "RetrievalResult", "cosine_distance", "extract_features",
    "format_report", "get_protocol", "sample_meta", "score", "score_distmat", "write_distance_csv",
]
