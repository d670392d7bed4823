"""Selects the compiled ranking kernel when available.

Set ``CCREID_PURE_PYTHON=1`` to force the numpy implementation.
"""
import logging
import os

from . import _rank_py

logger = logging.getLogger(__name__)

BACKEND = "python"
evaluate_ranked = _rank_py.evaluate_ranked

if os.environ.get("CCREID_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _rank_cy
    except ImportError:
        logger.debug("compiled ranking kernel unavailable, using numpy fallback")
    else:
        evaluate_ranked = _rank_cy.evaluate_ranked
        BACKEND = "cython"
