#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

"""
Object navigation as a conversation in a voxel grid world. Each step the agent observes its surroundings,
a waypoint policy answers with a goal cell or "stop", and a breadth-first local policy takes one
6-connected step toward the goal.
"""

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field
from logging import getLogger

import numpy as np

from .geometry import Aabb
from .localize import LocTokenConfig, encode_location, render_location_text


logger = getLogger(__name__)

# Axis order x, y, z; the first neighbour on a shortest path wins ties
NEIGHBOR_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))

STOP_POLICY = 'policy_stop'
STOP_BUDGET = 'step_budget'
STOP_UNREACHABLE = 'unreachable_waypoint'

DEFAULT_SUCCESS_RADIUS = 1.0
DEFAULT_OBSERVE_RADIUS = 3
STOP_REPLY = 'stop'

BUNDLED_MAZE = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'navmaps', 'bundled_maze.json')

_LOS_SAMPLES_PER_CELL = 4


class UnreachableError(ValueError):
    pass


class InvalidWaypointError(ValueError):
    pass


def _cell(value):
    c = tuple(int(x) for x in value)
    if len(c) != 3:
        raise ValueError('A cell has three integer coordinates, got %r' % (value,))
    return c


class NavEnv:
    def __init__(self, occupancy, start, target, target_label, cell_size=1.0, objects=()):
        self.occupancy = np.asarray(occupancy, dtype=bool)
        if self.occupancy.ndim != 3 or self.occupancy.size == 0:
            raise ValueError('Occupancy must be a non-empty 3D grid, got shape %r' % (self.occupancy.shape,))
        if not cell_size > 0:
            raise ValueError('cell_size must be positive')
        self.cell_size = float(cell_size)
        self.start = _cell(start)
        self.target = _cell(target)
        self.target_label = str(target_label)
        for name, c in (('start', self.start), ('target', self.target)):
            if not self.inside(c):
                raise ValueError('%s cell %r is outside the grid %r' % (name, c, self.dims))
            if not self.is_free(c):
                raise ValueError('%s cell %r is an obstacle' % (name, c))
        # Labelled cells: the target plus any distractor objects
        self.labels = {self.target: self.target_label}
        for c, label in objects:
            c = _cell(c)
            if not self.inside(c):
                raise ValueError('Object cell %r is outside the grid' % (c,))
            self.labels.setdefault(c, str(label))

    @property
    def dims(self):
        return self.occupancy.shape

    @property
    def bounds(self):
        return Aabb(np.zeros(3), np.asarray(self.dims, dtype=np.float64) * self.cell_size)

    def inside(self, c):
        return all(0 <= c[i] < self.dims[i] for i in range(3))

    def is_free(self, c):
        return self.inside(c) and not self.occupancy[c]

    def neighbors(self, c):
        for dx, dy, dz in NEIGHBOR_OFFSETS:
            n = (c[0] + dx, c[1] + dy, c[2] + dz)
            if self.is_free(n):
                yield n

    def cell_box(self, c):
        lo = np.asarray(c, dtype=np.float64) * self.cell_size
        return Aabb(lo, lo + self.cell_size)

    def loc_config(self, bins=256):
        return LocTokenConfig(scene_bounds=self.bounds, bins=bins)

    def distances_to(self, goal):
        """Breadth-first step counts from every reachable free cell to goal."""
        goal = _cell(goal)
        if not self.is_free(goal):
            return {}
        dist = {goal: 0}
        queue = deque([goal])
        while queue:
            c = queue.popleft()
            for n in self.neighbors(c):
                if n not in dist:
                    dist[n] = dist[c] + 1
                    queue.append(n)
        return dist

    def to_dict(self):
        objects = [dict(cell=list(c), label=label) for c, label in sorted(self.labels.items()) if c != self.target]
        return dict(dims=list(self.dims), cell_size=self.cell_size,
                    obstacles=[list(map(int, c)) for c in np.argwhere(self.occupancy)],
                    start=list(self.start), target=dict(cell=list(self.target), label=self.target_label),
                    objects=objects)

    @staticmethod
    def from_dict(d):
        try:
            dims = _cell(d['dims'])
            occupancy = np.zeros(dims, dtype=bool)
            for c in d.get('obstacles', ()):
                c = _cell(c)
                if not all(0 <= c[i] < dims[i] for i in range(3)):
                    raise ValueError('Obstacle %r is outside the grid %r' % (c, dims))
                occupancy[c] = True
            objects = [(o['cell'], o['label']) for o in d.get('objects', ())]
            return NavEnv(occupancy, d['start'], d['target']['cell'], d['target']['label'],
                          d.get('cell_size', 1.0), objects)
        except (KeyError, TypeError) as ex:
            raise ValueError('Malformed environment: %r' % ex)

    @staticmethod
    def load(path):
        with open(path, 'r', encoding='utf-8') as f:
            return NavEnv.from_dict(json.load(f))


@dataclass
class AgentState:
    position: tuple
    history: list
    observed: np.ndarray

    @staticmethod
    def begin(env):
        return AgentState(position=env.start, history=[env.start], observed=np.zeros(env.dims, dtype=bool))


@dataclass(frozen=True)
class Waypoint:
    cell: tuple


@dataclass(frozen=True)
class Stop:
    pass


def _line_of_sight(env, a, b):
    """True when every cell strictly between a and b along the segment is free."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = int(np.ceil(np.max(np.abs(b - a)) * _LOS_SAMPLES_PER_CELL)) + 1
    if n <= 2:
        return True
    t = np.linspace(0.0, 1.0, n)[1:-1, None]
    cells = np.floor(a + t * (b - a) + 0.5).astype(np.int64)
    ta, tb = tuple(a.astype(np.int64)), tuple(b.astype(np.int64))
    for c in map(tuple, cells):
        if c != ta and c != tb and env.occupancy[c]:
            return False
    return True


def observe(env, state, radius=DEFAULT_OBSERVE_RADIUS):
    """
    Marks cells within Chebyshev radius that the agent can see, then returns the (label, cell) summary of
    every observed labelled cell, sorted by cell.
    """
    if radius < 1:
        raise ValueError('Observation radius must be at least 1, got %r' % radius)
    p = state.position
    lo = [max(0, p[i] - radius) for i in range(3)]
    hi = [min(env.dims[i] - 1, p[i] + radius) for i in range(3)]
    for x in range(lo[0], hi[0] + 1):
        for y in range(lo[1], hi[1] + 1):
            for z in range(lo[2], hi[2] + 1):
                c = (x, y, z)
                if not state.observed[c] and _line_of_sight(env, p, c):
                    state.observed[c] = True
    return [(label, c) for c, label in sorted(env.labels.items()) if state.observed[c]]


def local_policy(env, start, waypoint, distances=None):
    """First step of a shortest 6-connected path from start to waypoint; ties go to x, then y, then z."""
    start = _cell(start)
    waypoint = _cell(waypoint)
    if not env.is_free(start):
        raise ValueError('Agent cell %r is not free' % (start,))
    if start == waypoint:
        return start
    dist = distances if distances is not None else env.distances_to(waypoint)
    if start not in dist:
        raise UnreachableError('Waypoint %r is unreachable from %r' % (waypoint, start))
    for n in env.neighbors(start):
        if dist.get(n) == dist[start] - 1:
            return n
    raise AssertionError('Inconsistent distance map at %r' % (start,))


class WaypointPolicy:
    """decide() returns Waypoint(cell) or Stop(); begin() is called once per episode."""

    def begin(self, env, state):
        pass

    def decide(self, summary, position, history):
        raise NotImplementedError


class OracleWaypointPolicy(WaypointPolicy):
    def begin(self, env, state):
        self.target = env.target

    def decide(self, summary, position, history):
        return Stop() if tuple(position) == self.target else Waypoint(self.target)


class ImmediateStopPolicy(WaypointPolicy):
    def decide(self, summary, position, history):
        return Stop()


class FrontierWaypointPolicy(WaypointPolicy):
    """
    Heads for the target once it has been observed; until then explores the nearest frontier, an observed
    free cell with an unobserved neighbour, found by breadth-first search over observed free cells.
    """

    def __init__(self, target_label=None):
        self.target_label = target_label
        self._goal = None

    def begin(self, env, state):
        self.env = env
        self.state = state
        self.target_label = self.target_label or env.target_label
        self._goal = None

    def _is_frontier(self, c):
        if not (self.state.observed[c] and self.env.is_free(c)):
            return False
        for dx, dy, dz in NEIGHBOR_OFFSETS:
            n = (c[0] + dx, c[1] + dy, c[2] + dz)
            if self.env.inside(n) and not self.state.observed[n]:
                return True
        return False

    def _nearest_frontier(self, position):
        seen = {position}
        queue = deque([position])
        while queue:
            c = queue.popleft()
            if self._is_frontier(c) and c != position:
                return c
            for n in self.env.neighbors(c):
                if n not in seen and self.state.observed[n]:
                    seen.add(n)
                    queue.append(n)
        return position if self._is_frontier(position) else None

    def decide(self, summary, position, history):
        position = tuple(position)
        for label, c in summary:
            if label == self.target_label:
                return Stop() if position == c else Waypoint(c)
        if self._goal is None or self._goal == position or not self._is_frontier(self._goal):
            self._goal = self._nearest_frontier(position)
        if self._goal is None:
            logger.debug('No frontier left at %r', position)
            return Stop()
        return Waypoint(self._goal)


@dataclass
class EpisodeResult:
    trajectory: list
    success: bool
    steps: int
    stop_reason: str
    turns: list = field(default_factory=list)      # (prompt, reply) per policy decision

    def to_dict(self):
        return dict(trajectory=[list(c) for c in self.trajectory], success=self.success, steps=self.steps,
                    stop_reason=self.stop_reason, turns=[dict(prompt=p, reply=r) for p, r in self.turns])


def _format_cell(c):
    return '(%d, %d, %d)' % tuple(c)


def conversation_prompt(summary, position, history, target_label):
    seen = ', '.join('%s at %s' % (label, _format_cell(c)) for label, c in summary) or 'nothing yet'
    return 'Find the %s. Observed: %s. Current location: %s. History: %s.' % (
        target_label, seen, _format_cell(position), ' '.join(_format_cell(c) for c in history))


def run_episode(env, policy, max_steps, success_radius=DEFAULT_SUCCESS_RADIUS, observe_radius=DEFAULT_OBSERVE_RADIUS):
    if max_steps < 1:
        raise ValueError('max_steps must be at least 1, got %r' % max_steps)
    state = AgentState.begin(env)
    policy.begin(env, state)
    loc_cfg = env.loc_config()
    distance_maps = {}
    steps = 0
    turns = []

    while True:
        summary = observe(env, state, observe_radius)
        decision = policy.decide(summary, state.position, tuple(state.history))
        prompt = conversation_prompt(summary, state.position, state.history, env.target_label)

        if isinstance(decision, Stop):
            turns.append((prompt, STOP_REPLY))
            gap = math.dist(state.position, env.target)
            success = gap <= success_radius
            reason = STOP_POLICY
            break

        waypoint = _cell(decision.cell)
        if not env.inside(waypoint):
            raise InvalidWaypointError('Policy chose %r outside the grid %r' % (waypoint, env.dims))
        turns.append((prompt, render_location_text(encode_location(env.cell_box(waypoint), loc_cfg))))

        if steps >= max_steps:
            success, reason = False, STOP_BUDGET
            break
        if waypoint not in distance_maps:
            distance_maps[waypoint] = env.distances_to(waypoint)
        try:
            nxt = local_policy(env, state.position, waypoint, distance_maps[waypoint])
        except UnreachableError as ex:
            logger.info('Episode ends: %s', ex)
            success, reason = False, STOP_UNREACHABLE
            break
        steps += 1
        if nxt != state.position:
            state.position = nxt
            state.history.append(nxt)

    logger.info('Episode %s after %d steps (%s)', 'succeeded' if success else 'failed', steps, reason)
    return EpisodeResult(trajectory=list(state.history), success=success, steps=steps, stop_reason=reason,
                         turns=turns)


def random_maze(dims, seed=0, obstacle_density=0.25, target_label='chair', distractors=('lamp', 'sofa'),
                min_distance=4, max_attempts=1000):
    """Random obstacle field whose target is reachable from the start at least min_distance steps away."""
    rng = np.random.default_rng(seed)
    dims = _cell(dims)
    for _ in range(max_attempts):
        occupancy = rng.random(dims) < obstacle_density
        free = np.argwhere(~occupancy)
        if len(free) < 2 + len(distractors):
            continue
        picks = rng.choice(len(free), size=2 + len(distractors), replace=False)
        start, target = tuple(free[picks[0]]), tuple(free[picks[1]])
        objects = [(tuple(free[i]), label) for i, label in zip(picks[2:], distractors)]
        env = NavEnv(occupancy, start, target, target_label, objects=objects)
        d = env.distances_to(target).get(env.start)
        if d is not None and d >= min_distance:
            return env
    raise ValueError('No connected maze found for dims %r after %d attempts' % (dims, max_attempts))
