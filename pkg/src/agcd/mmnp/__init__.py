"""Multi-agent narration: describers, sequential integrator, evaluator, editor, cache."""

from .backends import HttpBackend, MockBackend, NarratorBackend, apply_refinement, edit_narrative
from .cache import CacheRecord, NarrationCache, cache_get, cache_put
from .narrate import NarrationSummary, narrate_dataset, state_inputs
from .evaluator import FEEDBACK_TYPES, EvaluatorVerdict, Feedback, evaluate, inject_defect
from .pipeline import (
    PIPELINE_VERSION,
    PipelineResult,
    VariableInput,
    describe_variable,
    edit_step,
    integrate,
    refine,
    run_pipeline,
)
from .text import Clause, Narrative, VariableDescription, parse_clause

__all__ = [
    "CacheRecord", "Clause", "EvaluatorVerdict", "FEEDBACK_TYPES", "Feedback", "HttpBackend",
    "MockBackend", "NarrationCache", "NarrationSummary", "Narrative", "NarratorBackend", "PIPELINE_VERSION",
    "PipelineResult", "VariableDescription", "VariableInput", "apply_refinement", "cache_get",
    "cache_put", "describe_variable", "edit_narrative", "edit_step", "evaluate", "inject_defect",
    "integrate", "narrate_dataset", "parse_clause", "refine", "run_pipeline", "state_inputs",
]
