#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
The three prompting pipelines: box-demonstration-instruction prompting, the multi-view chat captioner
and record revision, plus location-token attachment for grounding data.
"""

import re
import threading
from concurrent.futures import ThreadPoolExecutor
from logging import getLogger

from ..localize import encode_location, render_location_text
from ..synthworld import DEFAULT_LABELS
from .clients import PromptRequest, ROLE_USER, DONE_TOKEN, PURPOSE_ASK, PURPOSE_SUMMARIZE, PURPOSE_REVISE
from .prompts import build_box_prompt, load_template
from .records import LanguageRecord, PipelineReport, MissingBoxesError, RecordFormatError, TASKS, LINE_TASKS, \
    TASK_CAPTION, TASK_DENSE_CAPTION, PROVENANCE_BOX_PROMPTED, PROVENANCE_CHAT_CAPTIONER, PROVENANCE_REVISION


logger = getLogger(__name__)

# Object names the validator watches for in generated text, on top of each scene's own labels
KNOWN_LABELS = DEFAULT_LABELS + (
    'armchair', 'bathtub', 'bookshelf', 'couch', 'counter', 'curtain', 'door', 'dresser', 'fireplace',
    'microwave', 'mirror', 'nightstand', 'oven', 'piano', 'pillow', 'refrigerator', 'rug', 'sink', 'stool',
    'toilet', 'wardrobe', 'window',
)

LOCATION_SEPARATOR = '; '

REGION_LABEL = 'region'

_QA_LINE = re.compile(r'^\s*Q:\s*(.+?)\s+A:\s*(.+?)\s*$')


class EmptyYieldError(RuntimeError):
    pass


def scene_id_of(scene):
    return 'scene-%04d' % scene.seed


def parse_qa_lines(text):
    """(question, answer) pairs from lines of the form "Q: ... A: ..."; other lines are ignored."""
    pairs = []
    for line in text.splitlines():
        m = _QA_LINE.match(line)
        if m:
            pairs.append((m.group(1), m.group(2)))
        elif line.strip():
            logger.debug('Ignoring completion line outside the Q/A grammar: %r', line)
    return pairs


class LabelValidator:
    """
    Rejects records that mention an object label the scene does not contain.
    Watched names are the known labels plus every label learned from scenes seen so far,
    so an object named in one scene of a batch is caught when another scene lacks it.
    """

    def __init__(self, vocabulary=KNOWN_LABELS):
        self.vocabulary = set(vocabulary)
        self._patterns = {}
        self._lock = threading.Lock()

    def learn(self, labels):
        with self._lock:
            self.vocabulary.update(labels)

    def _pattern(self, label):
        if label not in self._patterns:
            self._patterns[label] = re.compile(r'\b%s(?:s|es)?\b' % re.escape(label), re.IGNORECASE)
        return self._patterns[label]

    def mentioned(self, text, extra=()):
        with self._lock:
            labels = sorted(self.vocabulary | set(extra))
        return [x for x in labels if self._pattern(x).search(text)]

    def __call__(self, record, scene):
        present = set(scene.labels)
        self.learn(present)
        text = record.prompt + '\n' + record.response
        absent = [x for x in self.mentioned(text) if x not in present]
        if absent:
            logger.info('Rejecting %s record for %s: mentions %s', record.task, record.scene_id, ', '.join(absent))
            return False
        return True


def _mentioned_boxes(scene, text, validator):
    finder = validator if isinstance(validator, LabelValidator) else LabelValidator()
    present = finder.mentioned(text, scene.labels)
    objects = sorted((o for o in scene.objects if o.label in present),
                     key=lambda o: (o.label, tuple(o.aabb.min.tolist())))
    return tuple((o.label, o.aabb) for o in objects)


def _complete(client, request, report):
    try:
        return client.complete(request)
    finally:
        if report is not None:
            report.requests += 1
            report.retries += client.last_retries


def run_box_pipeline(scene, instruction, demos, task, client, validator=None, report=None, region=None,
                     scene_id=None, record_prompt=None):
    """
    One boxes-demonstration-instruction request for one scene. qa and dialog completions yield one record
    per "Q: ... A: ..." line; other tasks yield the whole completion as one record.
    """
    if task not in TASKS:
        raise ValueError('Unknown task %r' % task)
    validator = validator or LabelValidator()
    report = report if report is not None else PipelineReport()
    scene_id = scene_id or scene_id_of(scene)
    if record_prompt is None:
        record_prompt = load_template(task)['record_prompt']

    request = build_box_prompt(scene, instruction, demos, region=region, purpose=task)
    completion = _complete(client, request, report)

    if task in LINE_TASKS:
        candidates = parse_qa_lines(completion)
    else:
        candidates = [(record_prompt, completion.strip())] if completion.strip() else []

    records = []
    for prompt, response in candidates:
        if region is not None and task == TASK_DENSE_CAPTION:
            boxes = ((REGION_LABEL, region),)
        else:
            boxes = _mentioned_boxes(scene, prompt + '\n' + response, validator)
        try:
            record = LanguageRecord(scene_id=scene_id, task=task, prompt=prompt, response=response, boxes=boxes,
                                    provenance=PROVENANCE_BOX_PROMPTED)
        except (RecordFormatError, MissingBoxesError) as ex:
            logger.info('Rejecting %s record for %s: %s', task, scene_id, ex)
            report.records_rejected += 1
            continue
        if not validator(record, scene):
            report.records_rejected += 1
            continue
        records.append(record)
        report.count_record(record)

    if not records:
        raise EmptyYieldError('No valid %s records for %s (%d candidates)' % (task, scene_id, len(candidates)))
    logger.debug('%s: %d %s records', scene_id, len(records), task)
    return records


def run_batch(scenes, task, client, instruction=None, demos=(), validator=None, workers=1, scene_ids=None,
              template_dir=None):
    """
    Runs the box pipeline over independent scenes; results keep scene order whatever the worker count.
    Scenes that yield nothing are counted and skipped. The validator learns every scene's labels up front.
    Returns (records, report).
    """
    template = load_template(task, template_dir)
    instruction = instruction or template['instruction']
    scene_ids = list(scene_ids) if scene_ids is not None else [scene_id_of(s) for s in scenes]
    report = PipelineReport(scenes=len(scenes))
    validator = validator or LabelValidator()
    if isinstance(validator, LabelValidator):
        for scene in scenes:
            validator.learn(scene.labels)

    def one(item):
        scene, sid = item
        partial = PipelineReport()
        try:
            recs = run_box_pipeline(scene, instruction, demos, task, client, validator, partial, scene_id=sid,
                                    record_prompt=template['record_prompt'])
        except EmptyYieldError as ex:
            logger.warning('%s', ex)
            recs = []
        return recs, partial

    items = list(zip(scenes, scene_ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(x) for x in items]

    records = []
    for recs, partial in results:
        records += recs
        report.requests += partial.requests
        report.retries += partial.retries
        report.records_rejected += partial.records_rejected
        for r in recs:
            report.count_record(r)
    logger.info('Box pipeline %s: %d scenes, %d records, %d rejected', task, len(scenes),
                report.records_emitted, report.records_rejected)
    return records, report


def _history_text(history, empty):
    if not history:
        return empty
    return '\n'.join('Q: %s\nA: %s' % qa for qa in history)


def run_chat_captioner(views, asker, answerer, max_rounds, scene_id='scene', report=None):
    """
    The asker questions the scene, the answerer replies from one view per round (round-robin), then the
    asker summarizes the dialog into a single scene caption.
    """
    if not views:
        raise ValueError('The chat captioner needs at least one view')
    if max_rounds < 1:
        raise ValueError('max_rounds must be at least 1, got %r' % max_rounds)
    t = load_template('chat_captioner')
    report = report if report is not None else PipelineReport()

    history = []
    for round_index in range(max_rounds):
        ask = PromptRequest(system=t['asker'], purpose=PURPOSE_ASK,
                            messages=[(ROLE_USER, _history_text(history, t['empty_history']) + '\n' +
                                       t['ask_request'])])
        question = _complete(asker, ask, report).strip()
        if DONE_TOKEN in question or not question:
            logger.debug('%s: asker finished after %d questions', scene_id, len(history))
            break
        view = views[round_index % len(views)]
        answer = answerer.answer(PromptRequest(system=t['answerer'], messages=[(ROLE_USER, question)],
                                               purpose='answer'), view).strip()
        history.append((question, answer))

    summary_request = PromptRequest(system=t['summarizer'], purpose=PURPOSE_SUMMARIZE,
                                    messages=[(ROLE_USER, _history_text(history, t['empty_history']) + '\n' +
                                               t['summarize_request'])])
    caption = _complete(asker, summary_request, report).strip()
    if not caption:
        raise EmptyYieldError('Empty summary caption for %s' % scene_id)
    record = LanguageRecord(scene_id=scene_id, task=TASK_CAPTION,
                            prompt=load_template(TASK_CAPTION)['record_prompt'], response=caption,
                            provenance=PROVENANCE_CHAT_CAPTIONER)
    report.count_record(record)
    logger.info('%s: chat caption after %d rounds', scene_id, len(history))
    return record


def revise(record, target_task, client, report=None):
    """Converts a record into another task; scene id and boxes carry over."""
    if target_task not in TASKS:
        raise ValueError('Unknown task %r' % target_task)
    if target_task == record.task:
        raise ValueError('Record is already a %s record' % target_task)
    instruction = load_template('revision')['instruction'].format(source_task=record.task, target_task=target_task)
    record_prompt = load_template(target_task)['record_prompt']
    request = PromptRequest(system=instruction, purpose=PURPOSE_REVISE + target_task,
                            messages=[(ROLE_USER, 'Task: %s\nPrompt: %s\nResponse: %s' %
                                       (record.task, record.prompt, record.response))])
    completion = _complete(client, request, report).strip()

    pairs = parse_qa_lines(completion) if target_task in LINE_TASKS else []
    prompt, response = pairs[0] if pairs else (record_prompt, completion)
    if not response:
        raise EmptyYieldError('Empty revision of a %s record for %s' % (record.task, record.scene_id))
    revised = LanguageRecord(scene_id=record.scene_id, task=target_task, prompt=prompt, response=response,
                             boxes=record.boxes, provenance=PROVENANCE_REVISION)
    if report is not None:
        report.count_record(revised)
    return revised


def attach_location_tokens(record, cfg):
    """Appends one `<loc_k>` run per box to the response, runs separated by "; "."""
    if not record.boxes:
        raise MissingBoxesError('Record for %s has no boxes to localize' % record.scene_id)
    runs = [render_location_text(encode_location(box, cfg)) for _, box in record.boxes]
    return LanguageRecord(scene_id=record.scene_id, task=record.task, prompt=record.prompt,
                          response='%s %s' % (record.response, LOCATION_SEPARATOR.join(runs)),
                          boxes=record.boxes, provenance=record.provenance)
