from .planner import (
    PipelineConfig,
    Planner,
    parse_description,
    parse_numbered_steps,
    render_prev_block,
)
from .templates import PromptTemplate, TemplateLibrary, TemplateName, VARIANT_TEMPLATES

__all__ = [
    "PipelineConfig",
    "Planner",
    "PromptTemplate",
    "TemplateLibrary",
    "TemplateName",
    "VARIANT_TEMPLATES",
    "parse_description",
    "parse_numbered_steps",
    "render_prev_block",
]
