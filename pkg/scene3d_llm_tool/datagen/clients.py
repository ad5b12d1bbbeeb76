#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
LLM clients. The remote client speaks JSON over HTTP (chat-completions style messages array);
the mocks are pure functions of the request bytes and a seed so pipelines stay reproducible.
"""

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass
from logging import getLogger

import numpy as np
import requests

from ..synthworld import BACKGROUND_ID


logger = getLogger(__name__)

ROLE_USER = 'user'
ROLE_ASSISTANT = 'assistant'

ENV_ENDPOINT = 'LLM_ENDPOINT'
ENV_API_KEY = 'LLM_API_KEY'
ENV_MODEL = 'LLM_MODEL'

DEFAULT_MODEL = 'gpt-3.5-turbo'
DEFAULT_TIMEOUT = 60.0
RETRY_DELAYS = 1.0, 2.0, 4.0

DONE_TOKEN = '[DONE]'

PURPOSE_ASK = 'ask'
PURPOSE_SUMMARIZE = 'summarize'
PURPOSE_REVISE = 'revise:'

VISIBLE_PREFIX = 'Visible objects:'


class ClientError(RuntimeError):
    pass


class RetriableClientError(ClientError):
    pass


class ClientConfigurationError(ClientError):
    pass


class InvalidRequestError(ValueError):
    pass


@dataclass(frozen=True)
class PromptRequest:
    system: str
    messages: tuple             # (role, text) pairs
    temperature: float = 0.7
    max_tokens: int = 512
    purpose: str = ''           # what the pipeline asks for; mocks dispatch on it, never sent remotely

    def __post_init__(self):
        messages = tuple((str(role), str(text)) for role, text in self.messages)
        if not messages:
            raise InvalidRequestError('A prompt request needs at least one message')
        for i, (role, _) in enumerate(messages):
            expected = ROLE_USER if i % 2 == 0 else ROLE_ASSISTANT
            if role != expected:
                raise InvalidRequestError('Message %d has role %r, expected %r' % (i, role, expected))
        if self.max_tokens < 1:
            raise InvalidRequestError('max_tokens must be positive')
        object.__setattr__(self, 'messages', messages)

    @property
    def last_user_text(self):
        return self.messages[-1][1]

    def to_dict(self):
        return dict(system=self.system, messages=[list(m) for m in self.messages],
                    temperature=self.temperature, max_tokens=self.max_tokens, purpose=self.purpose)

    def to_bytes(self):
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode('utf-8')


class LlmClient:
    """Base class: pipelines call complete(request) and get the completion text back."""

    def __init__(self):
        self._lock = threading.Lock()
        self.requests_sent = 0
        self.retries = 0
        self._local = threading.local()

    def complete(self, request):
        with self._lock:
            self.requests_sent += 1
        self._local.retries = 0
        return self._complete(request)

    @property
    def last_retries(self):
        """Retries spent on the latest complete() call made from the calling thread."""
        return getattr(self._local, 'retries', 0)

    def _complete(self, request):
        raise NotImplementedError

    def _count_retry(self):
        self._local.retries = self.last_retries + 1
        with self._lock:
            self.retries += 1


class RemoteLlmClient(LlmClient):
    def __init__(self, endpoint, api_key, model=DEFAULT_MODEL, timeout=DEFAULT_TIMEOUT,
                 retry_delays=RETRY_DELAYS, sleep=time.sleep):
        super(RemoteLlmClient, self).__init__()
        if not endpoint:
            raise ClientConfigurationError('Remote client needs an endpoint URL')
        if not api_key:
            raise ClientConfigurationError('%s is set but %s is missing' % (ENV_ENDPOINT, ENV_API_KEY))
        self.endpoint = endpoint
        self.model = model or DEFAULT_MODEL
        self.timeout = timeout
        self.retry_delays = tuple(retry_delays)
        self._api_key = api_key
        self._sleep = sleep

    def payload(self, request):
        messages = [dict(role='system', content=request.system)]
        messages += [dict(role=role, content=text) for role, text in request.messages]
        return dict(model=self.model, messages=messages, temperature=request.temperature,
                    max_tokens=request.max_tokens)

    @staticmethod
    def _extract_text(body):
        try:
            return body['choices'][0]['message']['content']
        except (KeyError, IndexError, TypeError):
            pass
        if isinstance(body, dict) and isinstance(body.get('text'), str):
            return body['text']
        raise ClientError('Unrecognized completion payload: %r' % (body,))

    def _complete(self, request):
        headers = {'Authorization': 'Bearer %s' % self._api_key, 'Content-Type': 'application/json'}
        payload = self.payload(request)
        attempt = 0
        while True:
            try:
                resp = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise RetriableClientError('HTTP %d from %s' % (resp.status_code, self.endpoint))
                if resp.status_code >= 400:
                    raise ClientError('HTTP %d from %s: %s' % (resp.status_code, self.endpoint, resp.text[:200]))
                try:
                    body = resp.json()
                except ValueError:
                    raise ClientError('Completion from %s is not JSON' % self.endpoint)
                return self._extract_text(body)
            except (requests.RequestException, RetriableClientError) as ex:
                if attempt >= len(self.retry_delays):
                    raise RetriableClientError('Giving up on %s after %d retries: %s' %
                                               (self.endpoint, attempt, ex)) from ex
                delay = self.retry_delays[attempt]
                attempt += 1
                self._count_retry()
                logger.warning('LLM request failed (%s), retry %d in %.0f s', ex, attempt, delay)
                self._sleep(delay)


def _object_labels(serialized):
    """Labels of the object lines in serialized scene boxes, in order."""
    labels = []
    for line in serialized.splitlines():
        m = re.match(r'^([^:\[\]]+): \[', line)
        if m and m.group(1) not in ('room', 'region'):
            labels.append(m.group(1))
    return labels


def _listing(labels):
    names = ['a %s' % x for x in labels]
    if len(names) < 2:
        return ''.join(names)
    return '%s and %s' % (', '.join(names[:-1]), names[-1])


def _unique(items):
    seen = []
    for x in items:
        if x not in seen:
            seen.append(x)
    return seen


class DeterministicMock(LlmClient):
    """
    Seeded template responder. Box prompts answer about the objects listed in the last user message
    (one exchange per object for qa/dialog); the asker stops with [DONE] after done_after questions.
    """

    QA_TEMPLATES = (
        ('Where is the {label}?', 'The {label} stands inside the room.'),
        ('Is there a {label} in the room?', 'Yes, there is a {label}.'),
        ('What is the {label} close to?', 'The {label} is close to the room walls.'),
    )
    DIALOG_TEMPLATES = (
        ('Can you help me find the {label}?', 'Sure, the {label} is right in this room.'),
        ('I am looking for the {label}.', 'You will find the {label} in the room.'),
    )
    QUESTIONS = (
        'What objects can you see?',
        'Which objects are visible from here?',
        'What is in this part of the room?',
    )

    def __init__(self, seed=0, done_after=None):
        super(DeterministicMock, self).__init__()
        self.seed = seed
        self.done_after = done_after

    def _rng(self, request):
        digest = hashlib.sha256(request.to_bytes()).digest()
        return np.random.default_rng([self.seed, int.from_bytes(digest[:8], 'little')])

    def _complete(self, request):
        rng = self._rng(request)
        purpose = request.purpose
        text = request.last_user_text

        if purpose == PURPOSE_ASK:
            asked = sum(1 for line in text.splitlines() if line.startswith('Q: '))
            if self.done_after is not None and asked >= self.done_after:
                return DONE_TOKEN
            return self.QUESTIONS[int(rng.integers(len(self.QUESTIONS)))]

        if purpose == PURPOSE_SUMMARIZE:
            labels = []
            for line in text.splitlines():
                if line.startswith('A: ') and VISIBLE_PREFIX in line:
                    listed = line.split(VISIBLE_PREFIX, 1)[1].strip().rstrip('.')
                    labels += [x.strip() for x in listed.split(',') if x.strip() and x.strip() != 'none']
            labels = _unique(labels)
            if not labels:
                return 'An empty room with no recognizable objects.'
            return 'The scene contains %s.' % _listing(labels)

        if purpose.startswith(PURPOSE_REVISE):
            target = purpose[len(PURPOSE_REVISE):]
            m = re.search(r'^Response: (.*)$', text, re.MULTILINE | re.DOTALL)
            source = ' '.join((m.group(1) if m else text).split())
            if target in ('qa', 'dialog'):
                return 'Q: What can you tell me about the scene? A: %s' % source
            return source

        labels = _object_labels(text)
        if purpose in ('qa', 'dialog'):
            templates = self.QA_TEMPLATES if purpose == 'qa' else self.DIALOG_TEMPLATES
            lines = []
            for label in labels:
                q, a = templates[int(rng.integers(len(templates)))]
                lines.append('Q: %s A: %s' % (q.format(label=label), a.format(label=label)))
            return '\n'.join(lines)
        if purpose == 'caption':
            listed = _unique(labels)
            return 'A room with %s.' % _listing(listed) if listed else 'An empty room.'
        if purpose == 'dense_caption':
            listed = _unique(labels)
            return 'This region holds %s.' % _listing(listed) if listed else 'This region is empty.'
        if purpose == 'task_decomposition':
            steps = ['%d. Walk to the %s.' % (i + 1, x) for i, x in enumerate(_unique(labels))]
            return ' '.join(['To tidy up the room:'] + steps) if steps else 'Nothing to do in an empty room.'
        if purpose in ('grounding', 'navigation') and labels:
            label = labels[int(rng.integers(len(labels)))]
            return ('Find the %s.' if purpose == 'grounding' else 'Walk to the %s.') % label
        return 'OK.'


class ScriptedClient(LlmClient):
    """Replies with the given completions in order, repeating the last one once exhausted."""

    def __init__(self, *completions):
        super(ScriptedClient, self).__init__()
        if not completions:
            raise ValueError('ScriptedClient needs at least one completion')
        self.completions = completions
        self.received = []

    def _complete(self, request):
        self.received.append(request)
        index = min(len(self.received), len(self.completions)) - 1
        return self.completions[index]


class VqaClient:
    """Answers a question about one camera view."""

    def answer(self, request, view):
        raise NotImplementedError


class LabelReadingVqaMock(VqaClient):
    """Lists the ground-truth labels visible in the view, in label-id order."""

    def __init__(self, labels):
        self.labels = tuple(labels)

    def answer(self, request, view):
        ids = sorted(int(i) for i in np.unique(view.semantics) if i != BACKGROUND_ID)
        names = [self.labels[i] for i in ids]
        return '%s %s.' % (VISIBLE_PREFIX, ', '.join(names) if names else 'none')


def client_from_environment(environ=None, seed=0):
    """Remote client when LLM_ENDPOINT is set, otherwise the seeded mock."""
    environ = os.environ if environ is None else environ
    endpoint = environ.get(ENV_ENDPOINT)
    if not endpoint:
        logger.info('%s not set, using the deterministic mock client (seed %d)', ENV_ENDPOINT, seed)
        return DeterministicMock(seed)
    if not environ.get(ENV_API_KEY):
        raise ClientConfigurationError('%s is set but %s is missing' % (ENV_ENDPOINT, ENV_API_KEY))
    logger.info('Using remote LLM endpoint %s', endpoint)
    return RemoteLlmClient(endpoint, environ[ENV_API_KEY], environ.get(ENV_MODEL) or DEFAULT_MODEL)
