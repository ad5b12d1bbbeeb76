#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import json
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from ..geometry import Aabb


logger = getLogger(__name__)

TASK_CAPTION = 'caption'
TASK_DENSE_CAPTION = 'dense_caption'
TASK_QA = 'qa'
TASK_TASK_DECOMPOSITION = 'task_decomposition'
TASK_DIALOG = 'dialog'
TASK_GROUNDING = 'grounding'
TASK_NAVIGATION = 'navigation'

TASKS = (TASK_CAPTION, TASK_DENSE_CAPTION, TASK_QA, TASK_TASK_DECOMPOSITION, TASK_DIALOG, TASK_GROUNDING,
         TASK_NAVIGATION)

# Tasks whose completions hold one "Q: ... A: ..." exchange per line
LINE_TASKS = (TASK_QA, TASK_DIALOG)

PROVENANCE_BOX_PROMPTED = 'box_prompted'
PROVENANCE_CHAT_CAPTIONER = 'chat_captioner'
PROVENANCE_REVISION = 'revision'

PROVENANCES = PROVENANCE_BOX_PROMPTED, PROVENANCE_CHAT_CAPTIONER, PROVENANCE_REVISION

SPLIT_TRAIN_TENTHS = 8
SPLIT_VAL_TENTHS = 1
MIN_SPLIT_RECORDS = 10


class MissingBoxesError(ValueError):
    pass


class SplitSizeError(ValueError):
    pass


class RecordFormatError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = 'line %d: %s' % (line, message)
        super(RecordFormatError, self).__init__(message)
        self.line = line


@dataclass(frozen=True)
class LanguageRecord:
    scene_id: str
    task: str
    prompt: str
    response: str
    boxes: tuple = ()           # (label, Aabb) pairs
    provenance: str = PROVENANCE_BOX_PROMPTED

    def __post_init__(self):
        if self.task not in TASKS:
            raise RecordFormatError('Unknown task %r' % self.task)
        if self.provenance not in PROVENANCES:
            raise RecordFormatError('Unknown provenance %r' % self.provenance)
        if not self.prompt.strip() or not self.response.strip():
            raise RecordFormatError('Record for scene %r has an empty prompt or response' % self.scene_id)
        object.__setattr__(self, 'boxes', tuple((str(label), box) for label, box in self.boxes))
        if self.task == TASK_GROUNDING and not self.boxes:
            raise MissingBoxesError('Grounding record for scene %r carries no boxes' % self.scene_id)

    def to_dict(self):
        return dict(scene_id=self.scene_id, task=self.task, prompt=self.prompt, response=self.response,
                    boxes=[[label, box.to_list()] for label, box in self.boxes], provenance=self.provenance)

    @staticmethod
    def from_dict(d):
        try:
            boxes = tuple((label, Aabb.from_list(values)) for label, values in d.get('boxes') or ())
            return LanguageRecord(scene_id=d['scene_id'], task=d['task'], prompt=d['prompt'],
                                  response=d['response'], boxes=boxes,
                                  provenance=d.get('provenance', PROVENANCE_BOX_PROMPTED))
        except (RecordFormatError, MissingBoxesError):
            raise
        except KeyError as ex:
            raise RecordFormatError('Missing field %s' % ex)
        except (TypeError, ValueError) as ex:
            raise RecordFormatError(str(ex))

    def to_json(self):
        return json.dumps(self.to_dict(), ensure_ascii=False)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


@dataclass
class PipelineReport:
    scenes: int = 0
    requests: int = 0
    records_emitted: int = 0
    records_rejected: int = 0
    retries: int = 0
    tasks: dict = field(default_factory=dict)

    def count_record(self, record):
        self.records_emitted += 1
        self.tasks[record.task] = self.tasks.get(record.task, 0) + 1

    def to_dict(self):
        return dict(scenes=self.scenes, requests=self.requests, records_emitted=self.records_emitted,
                    records_rejected=self.records_rejected, retries=self.retries,
                    tasks=dict(sorted(self.tasks.items())))

    def write(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')


def write_jsonl(path, records):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for r in records:
            f.write(r.to_json())
            f.write('\n')
    logger.info('Wrote %d records to %r', len(records), path)


def read_jsonl(path):
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except ValueError as ex:
                raise RecordFormatError('Invalid JSON: %s' % ex, number)
            try:
                records.append(LanguageRecord.from_dict(d))
            except RecordFormatError as ex:
                raise RecordFormatError(str(ex), number)
    return records


def split_dataset(records, seed=0):
    """
    Shuffles deterministically by seed, then cuts floor(0.8 n) / floor(0.1 n) / remainder.
    """
    records = list(records)
    n = len(records)
    if n < MIN_SPLIT_RECORDS:
        raise SplitSizeError('Need at least %d records to split, got %d' % (MIN_SPLIT_RECORDS, n))
    order = np.random.default_rng(seed).permutation(n)
    n_train = n * SPLIT_TRAIN_TENTHS // 10
    n_val = n * SPLIT_VAL_TENTHS // 10
    shuffled = [records[i] for i in order]
    split = DatasetSplit(train=tuple(shuffled[:n_train]),
                         val=tuple(shuffled[n_train:n_train + n_val]),
                         test=tuple(shuffled[n_train + n_val:]))
    logger.info('Split %d records into %d/%d/%d (seed %d)', n, *split.sizes, seed)
    return split
