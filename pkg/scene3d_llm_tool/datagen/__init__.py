#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
3D-language data generation: prompt construction, LLM clients, the prompting pipelines and dataset I/O.
"""

from .records import LanguageRecord, DatasetSplit, PipelineReport, MissingBoxesError, SplitSizeError, \
    RecordFormatError, TASKS, PROVENANCES, read_jsonl, write_jsonl, split_dataset
from .clients import PromptRequest, LlmClient, RemoteLlmClient, DeterministicMock, ScriptedClient, VqaClient, \
    LabelReadingVqaMock, ClientError, RetriableClientError, ClientConfigurationError, InvalidRequestError, \
    client_from_environment
from .prompts import TooManyDemosError, TemplateError, serialize_scene_boxes, build_box_prompt, region_objects, \
    load_template, available_templates
from .pipelines import EmptyYieldError, LabelValidator, KNOWN_LABELS, run_box_pipeline, run_batch, \
    run_chat_captioner, revise, attach_location_tokens, parse_qa_lines, scene_id_of
