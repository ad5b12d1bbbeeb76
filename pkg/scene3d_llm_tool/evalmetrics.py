#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Text and grounding metrics: BLEU-1..4, ROUGE-L, CIDEr, exact match, ACC@kIoU, mean IoU and
mean centre distance.

BLEU comes from nltk, ROUGE-L from rouge_score and CIDEr is built on pycocoevalcap's n-gram cooking
and document frequencies. All three see the same fixed tokenization: lowercase, delete the
characters .,!?;:'" and split on whitespace.
"""

import json
import math
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np
from nltk.translate.bleu_score import modified_precision, sentence_bleu
from pycocoevalcap.cider.cider_scorer import CiderScorer as CocoCiderScorer, precook
from rouge_score import rouge_scorer, tokenizers

from .geometry import aabb_iou, aabb_center_distance
from .localize import find_location_sequences, decode_location, LocationParseError, InvalidTokenError


logger = getLogger(__name__)

MAX_ORDER = 4
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
DEFAULT_IOU_THRESHOLD = 0.25

_PUNCTUATION = str.maketrans('', '', '.,!?;:\'"')


class InsufficientCorpusError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


class EvalFormatError(ValueError):
    def __init__(self, message, line):
        super(EvalFormatError, self).__init__('line %d: %s' % (line, message))
        self.line = line


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, 'tokens', tuple(self.tokens))
        if any(not t for t in self.tokens):
            raise ValueError('Empty token in %r' % (self.tokens,))

    def __len__(self):
        return len(self.tokens)


def tokenize(text):
    if isinstance(text, TokenizedText):
        return text
    return TokenizedText(text.lower().translate(_PUNCTUATION).split())


def normalize(text):
    return ' '.join(tokenize(text).tokens)


def _refs(references):
    refs = [tokenize(r) for r in references]
    if not refs:
        raise ValueError('At least one reference is required')
    return refs


def bleu(candidate, references, n=MAX_ORDER):
    """
    Sentence BLEU with uniform weights and the closest-reference brevity penalty.
    Orders longer than the candidate have no n-grams to score and are left out of the mean, so a candidate
    identical to a reference scores 1.0 at every n. Any scored order without a match gives 0.
    """
    if not 1 <= n <= MAX_ORDER:
        raise ValueError('BLEU order must be in 1..%d, got %r' % (MAX_ORDER, n))
    cand = list(tokenize(candidate).tokens)
    refs = [list(r.tokens) for r in _refs(references)]
    if not cand:
        return 0.0

    orders = min(n, len(cand))
    if any(modified_precision(refs, cand, order).numerator == 0 for order in range(1, orders + 1)):
        return 0.0
    return float(sentence_bleu(refs, cand, weights=(1.0 / orders,) * orders))


class _FixedTokenizer(tokenizers.Tokenizer):
    def tokenize(self, text):
        return list(tokenize(text).tokens)


_rouge = rouge_scorer.RougeScorer(['rougeL'], tokenizer=_FixedTokenizer())


def rouge_l(candidate, references, beta=ROUGE_BETA):
    """LCS precision and recall from rouge_score, combined as an F-measure with the given beta; best reference wins."""
    refs = _refs(references)
    if len(tokenize(candidate)) == 0:
        return 0.0
    best = 0.0
    for ref in refs:
        lcs = _rouge.score(normalize(ref), normalize(candidate))['rougeL']
        p, r = lcs.precision, lcs.recall
        if p == 0 or r == 0:
            continue
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


class CiderScorer:
    """
    Corpus-level CIDEr. The reference sets are cooked by pycocoevalcap and its document frequencies
    (one count per item) form the IDF table; items are then scored independently against it.

    Each reference cosine is damped by a gaussian on the length difference. An order the candidate
    has no n-grams of is left out of the per-order mean. Scores are unscaled: pycocoevalcap's x10 is
    applied only by cider(scale=True).
    """

    def __init__(self, references_per_item, sigma=CIDER_SIGMA, max_order=MAX_ORDER):
        self.sigma = sigma
        self.max_order = max_order
        self.corpus = CocoCiderScorer(n=max_order, sigma=sigma)
        for refs in references_per_item:
            self.corpus += (None, [normalize(r) for r in _refs(refs)])
        if len(self.corpus.crefs) < 2:
            raise InsufficientCorpusError('CIDEr needs a corpus of at least 2 items, got %d' % len(self.corpus.crefs))
        self.corpus.compute_doc_freq()
        self.corpus.ref_len = np.log(float(len(self.corpus.crefs)))
        self.ref_vectors = [[self._vector(r) for r in refs] for refs in self.corpus.crefs]

    def _vector(self, counts):
        vec = [{} for _ in range(self.max_order)]
        length = 0
        for ngram, tf in counts.items():
            if len(ngram) == 1:
                length += tf
            if len(ngram) <= self.max_order:
                df = self.corpus.document_frequency[ngram]
                vec[len(ngram) - 1][ngram] = tf * (self.corpus.ref_len - np.log(max(1.0, df)))
        norm = [math.sqrt(sum(v * v for v in order.values())) for order in vec]
        return vec, norm, length

    def item_score(self, candidate, index):
        vec, norm, length = self._vector(precook(normalize(candidate), self.max_order))
        refs = self.ref_vectors[index]
        per_order = []
        for n in range(self.max_order):
            if not vec[n]:
                continue
            total = 0.0
            for ref_vec, ref_norm, ref_length in refs:
                if norm[n] == 0 or ref_norm[n] == 0:
                    continue
                dot = sum(w * ref_vec[n].get(g, 0.0) for g, w in vec[n].items())
                penalty = math.exp(-((length - ref_length) ** 2) / (2 * self.sigma ** 2))
                total += penalty * dot / (norm[n] * ref_norm[n])
            per_order.append(total / len(refs))
        return float(np.mean(per_order)) if per_order else 0.0

    def scores(self, candidates):
        if len(candidates) != len(self.ref_vectors):
            raise LengthMismatchError('%d candidates for %d reference sets' % (len(candidates), len(self.ref_vectors)))
        return [self.item_score(c, i) for i, c in enumerate(candidates)]


def cider(candidates, references_per_item, scale=False, sigma=CIDER_SIGMA):
    """Mean item CIDEr; the raw cosine average is in [0, 1] and is multiplied by 10 only with scale=True."""
    scores = CiderScorer(references_per_item, sigma).scores(candidates)
    value = float(np.mean(scores))
    return value * CIDER_SCALE if scale else value


def exact_match(candidate, references):
    if not references:
        raise ValueError('At least one reference is required')
    cand = normalize(candidate)
    return int(any(cand == normalize(r) for r in references))


@dataclass(frozen=True)
class GroundingReport:
    acc_at_k: float
    avg_iou: float
    avg_dist: float
    k: float = DEFAULT_IOU_THRESHOLD

    def to_dict(self):
        return {'acc@%g' % self.k: self.acc_at_k, 'avg_iou': self.avg_iou, 'avg_dist': self.avg_dist}


def grounding_metrics(pred, gt, k=DEFAULT_IOU_THRESHOLD):
    """acc_at_k counts predictions whose IoU strictly exceeds k."""
    if len(pred) != len(gt):
        raise LengthMismatchError('%d predicted boxes for %d ground-truth boxes' % (len(pred), len(gt)))
    if not pred:
        raise ValueError('No boxes to evaluate')
    ious = np.array([aabb_iou(p, g) for p, g in zip(pred, gt)])
    dists = np.array([aabb_center_distance(p, g) for p, g in zip(pred, gt)])
    return GroundingReport(acc_at_k=float(np.mean(ious > k)), avg_iou=float(ious.mean()),
                           avg_dist=float(dists.mean()), k=k)


@dataclass(frozen=True)
class EvalItem:
    id: str
    candidate: str
    references: tuple


@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    em: float
    per_item: list = field(default_factory=list)
    cider_scaled: bool = False

    def to_dict(self):
        return dict(bleu1=self.bleu1, bleu2=self.bleu2, bleu3=self.bleu3, bleu4=self.bleu4, rouge_l=self.rouge_l,
                    cider=self.cider, em=self.em, cider_scaled=self.cider_scaled, per_item=self.per_item)


def evaluate_batch(items, scale_cider=False):
    if not items:
        raise ValueError('No items to evaluate')
    scorer = CiderScorer([it.references for it in items])
    per_item = []
    for i, it in enumerate(items):
        scores = dict(id=it.id)
        for n in range(1, MAX_ORDER + 1):
            scores['bleu%d' % n] = bleu(it.candidate, it.references, n)
        scores['rouge_l'] = rouge_l(it.candidate, it.references)
        c = scorer.item_score(it.candidate, i)
        scores['cider'] = c * CIDER_SCALE if scale_cider else c
        scores['em'] = exact_match(it.candidate, it.references)
        per_item.append(scores)

    def mean(key):
        return float(np.mean([s[key] for s in per_item]))

    report = MetricReport(bleu1=mean('bleu1'), bleu2=mean('bleu2'), bleu3=mean('bleu3'), bleu4=mean('bleu4'),
                          rouge_l=mean('rouge_l'), cider=mean('cider'), em=mean('em'), per_item=per_item,
                          cider_scaled=scale_cider)
    logger.info('Evaluated %d items: BLEU-4 %.4f ROUGE-L %.4f CIDEr %.4f EM %.4f',
                len(items), report.bleu4, report.rouge_l, report.cider, report.em)
    return report


def _first_box(text, loc_cfg):
    try:
        found = find_location_sequences(text, loc_cfg.bins, loc_cfg.base_vocab)
    except (LocationParseError, InvalidTokenError):
        return None
    return decode_location(found[0], loc_cfg) if found else None


def evaluate_grounding(items, loc_cfg, k=DEFAULT_IOU_THRESHOLD):
    """
    Grounding over location-token text: the first six-token run of the candidate is compared with the
    first run of the first reference. A candidate without a decodable run scores IoU 0 at the scene
    diagonal distance.
    """
    if not items:
        raise ValueError('No items to evaluate')
    diagonal = float(np.linalg.norm(loc_cfg.scene_bounds.extent))
    ious, dists = [], []
    for it in items:
        gt = _first_box(it.references[0], loc_cfg)
        if gt is None:
            raise ValueError('Reference of item %r holds no location tokens' % it.id)
        pred = _first_box(it.candidate, loc_cfg)
        if pred is None:
            logger.debug('Item %r: no decodable prediction', it.id)
            ious.append(0.0)
            dists.append(diagonal)
            continue
        ious.append(aabb_iou(pred, gt))
        dists.append(aabb_center_distance(pred, gt))
    ious = np.asarray(ious)
    return GroundingReport(acc_at_k=float(np.mean(ious > k)), avg_iou=float(ious.mean()),
                           avg_dist=float(np.mean(dists)), k=k)


def read_eval_items(path):
    """JSONL of {id, candidate, references: [...]}, one item per line."""
    items = []
    with open(path, 'r', encoding='utf-8') as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except ValueError as ex:
                raise EvalFormatError('Invalid JSON: %s' % ex, number)
            if not isinstance(d, dict):
                raise EvalFormatError('Expected an object', number)
            for key in ('id', 'candidate', 'references'):
                if key not in d:
                    raise EvalFormatError('Missing field %r' % key, number)
            refs = d['references']
            if not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
                raise EvalFormatError('references must be a non-empty list of strings', number)
            if not isinstance(d['candidate'], str):
                raise EvalFormatError('candidate must be a string', number)
            items.append(EvalItem(id=str(d['id']), candidate=d['candidate'], references=tuple(refs)))
    return items
