"""Commonsense knowledge-graph distillation pipeline."""

from .errors import (
    ConfigError,
    CostCapError,
    EvalError,
    FilterError,
    GatewayError,
    PipelineError,
    PlanError,
    RequestError,
    SchemaError,
    StoreError,
    TransportError,
)
from .schema import (
    BLANK,
    DEFAULT_LANG,
    HINDERED_BY,
    RELATION_ORDER,
    RELATIONS,
    FilterStatus,
    HeadItem,
    KnowledgeType,
    PromptSpec,
    Relation,
    TemplateSet,
    Triple,
    get_relation,
    normalize_text,
    valid_relations,
)
from .distiller import DistillPlan, derive_rng
from .store import GraphStats, TripleStore
from .evalsvc import (
    AcceptanceReport,
    AnnotationStore,
    EvalSample,
    EvalService,
    build_eval_sample,
    compute_acceptance,
)
from .config import PipelineConfig, load_config

__version__ = "0.1.0"
