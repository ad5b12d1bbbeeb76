#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import os
from logging import getLogger

import yaml

from .clients import PromptRequest, ROLE_USER, ROLE_ASSISTANT


logger = getLogger(__name__)

MAX_DEMOS = 3

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'templates')


class TooManyDemosError(ValueError):
    pass


class TemplateError(ValueError):
    pass


def _coord(x):
    return '%.2f' % (round(float(x), 2) + 0.0)        # + 0.0 folds -0.00 into 0.00


def format_box(box):
    return '[%s]' % ', '.join(_coord(x) for x in box.to_list())


def region_objects(scene, region):
    """Objects whose centre lies inside the query region."""
    return [o for o in scene.objects if region.contains_point(o.center)]


def serialize_scene_boxes(scene, region=None):
    """
    Room bounds first, then "label: [xmin, ymin, zmin, xmax, ymax, zmax]" per object sorted by
    (label, xmin, ymin, zmin). With a region, a "region:" line follows the room and only the objects
    inside the region are listed.
    """
    lines = ['room: %s' % format_box(scene.bounds)]
    objects = scene.objects
    if region is not None:
        lines.append('region: %s' % format_box(region))
        objects = region_objects(scene, region)
    for obj in sorted(objects, key=lambda o: (o.label, tuple(o.aabb.min.tolist()))):
        lines.append('%s: %s' % (obj.label, format_box(obj.aabb)))
    return '\n'.join(lines)


def build_box_prompt(scene, instruction, demos=(), region=None, purpose='', temperature=0.7, max_tokens=512):
    demos = list(demos)
    if len(demos) > MAX_DEMOS:
        raise TooManyDemosError('At most %d demonstrations are allowed, got %d' % (MAX_DEMOS, len(demos)))
    messages = []
    for demo_scene, demo_response in demos:
        messages.append((ROLE_USER, serialize_scene_boxes(demo_scene)))
        messages.append((ROLE_ASSISTANT, demo_response))
    messages.append((ROLE_USER, serialize_scene_boxes(scene, region)))
    return PromptRequest(system=instruction, messages=messages, temperature=temperature,
                         max_tokens=max_tokens, purpose=purpose)


def available_templates():
    return sorted(os.path.splitext(n)[0] for n in os.listdir(TEMPLATE_DIR) if n.endswith('.yaml'))


def load_template(name, directory=None):
    """Reads one YAML instruction template; a custom directory overrides the bundled set."""
    path = os.path.join(directory or TEMPLATE_DIR, name + '.yaml')
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as ex:
        raise TemplateError('Template %r is not valid YAML: %s' % (path, ex))
    if not isinstance(data, dict):
        raise TemplateError('Template %r must be a mapping' % path)
    logger.debug('Loaded template %r', path)
    return data
