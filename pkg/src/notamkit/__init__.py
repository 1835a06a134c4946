"""NOTAM semantic parsing: schema extraction, field discovery, debate refinement and evaluation."""

__version__ = "0.1.0"

from .corpus import NotamRecord, compute_stats, load_corpus, parse_notam
from .debate import DebateConfig, field_manager_apply, run_hdf
from .discovery import AggregatorConfig, CandidateSet, EmergentField, consensus_aggregate, run_mda
from .evalkit import EvalReport, score_discovery, score_extraction
from .gateway import LiveBackend, MockBackend, PromptRequest, ReplayBackend
from .schema import ExtractionResult, FieldSchema, get_schema, grade_als
from .strategies import StrategyConfig, apply_srcv, run_extraction, self_consistency_vote

__all__ = [
    "AggregatorConfig", "CandidateSet", "DebateConfig", "EmergentField", "EvalReport", "ExtractionResult",
    "FieldSchema", "LiveBackend", "MockBackend", "NotamRecord", "PromptRequest", "ReplayBackend",
    "StrategyConfig", "apply_srcv", "compute_stats", "consensus_aggregate", "field_manager_apply",
    "get_schema", "grade_als", "load_corpus", "parse_notam", "run_extraction", "run_hdf", "run_mda",
    "score_discovery", "score_extraction", "self_consistency_vote",
]
