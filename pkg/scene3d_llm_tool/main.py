#
# Copyright (C) 2026  scene3d_llm_tool developers
#
# This software is distributed under the terms of the MIT License.
#

import glob
import json
import logging
import math
import os
import sys
import tempfile
from argparse import ArgumentParser

import numpy as np

from .version import __version__


logger = logging.getLogger(__name__.replace('__', ''))

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_CLIENT = 4

CAMERAS_FILE = 'cameras.json'
VIEW_CHANNELS = 'rgb', 'depth', 'features', 'semantics'

EXTRACT_METHODS = 'direct', 'fuse', 'field'
NAV_POLICIES = 'oracle', 'frontier', 'stop'
PIPELINES = 'box', 'chat', 'revise'


class UsageError(Exception):
    pass


class _Parser(ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def configure_logging(debug=False, log_file=None):
    """
    Installs the file log, which goes to a temp location unless one is given.
    Stderr is reserved for the error line; only debug mode echoes the log there as well.
    Returns the installed handlers so the caller can remove them.
    """
    logging_level = logging.DEBUG if debug else logging.INFO
    logging.root.setLevel(logging_level)
    if log_file is None:
        log_file = tempfile.NamedTemporaryFile(mode='w', prefix='scene3d_llm_tool-', suffix='.log',
                                               delete=False).name
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging_level)
    file_handler.setFormatter(logging.Formatter('%(asctime)s [%(process)d] %(levelname)-8s %(name)-25s %(message)s'))
    handlers = [file_handler]
    if debug:
        console = logging.StreamHandler(sys.stderr)
        console.setLevel(logging.DEBUG)
        console.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s %(message)s'))
        handlers.append(console)
    for handler in handlers:
        logging.root.addHandler(handler)
    return handlers


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_config(args):
    from .config import RunConfig
    return RunConfig.load(getattr(args, 'config', None))


def _embedding(cfg, seed):
    from .synthworld import LabelEmbedding
    return LabelEmbedding(dim=cfg.render.feature_dim, seed=seed)


def _render_views(scene, cfg, embed, n_views=None):
    from .geometry import CameraIntrinsics
    from .synthworld import render_orbit
    r = cfg.render
    intr = CameraIntrinsics.from_fov(r.width, r.height, r.fov_deg)
    return render_orbit(scene, embed, n_views or r.n_views, r.radius, intr, r.elevation)


def _load_scene(path):
    from .synthworld import Scene
    with open(path, 'r', encoding='utf-8') as f:
        return Scene.from_json(f.read())


#
# Commands
#
def cmd_scene(args):
    from .synthworld import make_scene
    cfg = _load_config(args)
    n_objects = args.n_objects if args.n_objects is not None else cfg.render.n_objects
    scene = make_scene(args.seed, n_objects, cfg.render.scene_bounds)
    with open(args.out, 'w', encoding='utf-8') as f:
        f.write(scene.to_json())
        f.write('\n')
    logger.info('Scene seed=%d with %d objects written to %r', args.seed, n_objects, args.out)
    _print_json(dict(scene=args.out, objects=len(scene.objects), labels=scene.labels))


def cmd_render(args):
    from . import tensorfile
    cfg = _load_config(args)
    scene = _load_scene(args.scene)
    embed = _embedding(cfg, args.seed)
    views = _render_views(scene, cfg, embed, args.views)
    os.makedirs(args.out_dir, exist_ok=True)

    manifest = dict(scene_seed=scene.seed, bounds=scene.bounds.to_list(), embedding=embed.to_dict(), views=[])
    for k, view in enumerate(views):
        files = {}
        for channel in VIEW_CHANNELS:
            name = 'view_%03d_%s.f3dt' % (k, channel)
            tensorfile.write_tensor(os.path.join(args.out_dir, name), getattr(view, channel))
            files[channel] = name
        manifest['views'].append(dict(index=k, intrinsics=view.intr.to_dict(), pose=view.pose.to_dict(),
                                      hit_pixels=view.hit_count, files=files))
    with open(os.path.join(args.out_dir, CAMERAS_FILE), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info('Rendered %d views into %r', len(views), args.out_dir)
    _print_json(dict(views=len(views), files=sorted(os.listdir(args.out_dir))))


def load_views(views_dir):
    """Reads the views and manifest written by the render command."""
    from . import tensorfile
    from .geometry import CameraIntrinsics, CameraPose
    from .synthworld import CameraView
    with open(os.path.join(views_dir, CAMERAS_FILE), 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    views = []
    for entry in manifest['views']:
        arrays = {c: tensorfile.read_tensor(os.path.join(views_dir, entry['files'][c])).astype(np.float64)
                  for c in VIEW_CHANNELS}
        views.append(CameraView(rgb=arrays['rgb'], depth=arrays['depth'], features=arrays['features'],
                                semantics=np.rint(arrays['semantics']).astype(np.int64),
                                intr=CameraIntrinsics.from_dict(entry['intrinsics']),
                                pose=CameraPose.from_dict(entry['pose'])))
    if not views:
        raise ValueError('No views listed in %r' % views_dir)
    return views, manifest


def cmd_extract(args):
    from .geometry import Aabb
    cfg = _load_config(args)
    views, manifest = load_views(args.views_dir)
    bounds = Aabb.from_list(manifest['bounds'])
    report = dict(method=args.method, views=len(views), hit_pixels=sum(v.hit_count for v in views), out=args.out)

    if args.method == 'direct':
        from .extractor import direct_reconstruct
        cloud = direct_reconstruct(views)
        cloud.save(args.out)
        report.update(N=len(cloud), D_v=cloud.feature_dim)

    elif args.method == 'fuse':
        from .extractor import fuse
        size = cfg.fusion.voxel_size
        dims = [max(1, int(math.ceil(e / size))) for e in bounds.extent]
        n_labels = len(manifest['embedding']['labels'])
        fused = fuse(views, bounds.min, size, dims, n_labels=n_labels, workers=cfg.fusion.workers)
        fused.save(args.out)
        report.update(fused.meta())

    elif args.method == 'field':
        from .voxfield import VoxelFeatureGrid, fit, write_loss_trace
        grid = VoxelFeatureGrid.covering(bounds, cfg.fusion.grid_resolution, views[0].feature_dim)
        train_cfg = cfg.train if args.seed is None else cfg.with_overrides('train', seed=args.seed).train
        result = fit(grid, views, train_cfg, cfg.ray_sample)
        result.grid.save(args.out)
        trace_path = os.path.splitext(args.out)[0] + '_loss.csv'
        write_loss_trace(trace_path, result.trace)
        report.update(initial_loss=result.initial_loss, final_loss=result.final_loss, loss_trace=trace_path,
                      steps=len(result.trace))

    else:
        raise UsageError('Unknown extraction method %r' % args.method)
    _print_json(report)


def _parse_box(text):
    from .geometry import Aabb
    if os.path.isfile(text):
        with open(text, 'r', encoding='utf-8') as f:
            text = f.read()
    return Aabb.from_list(json.loads(text))


def cmd_tokenize(args):
    from .localize import encode_location, decode_location, render_location_text, parse_location_text
    cfg = _load_config(args)
    bounds = _parse_box(args.bounds) if args.bounds else None
    loc_cfg = cfg.loc_token_config(bounds)
    if args.decode:
        tokens = parse_location_text(args.decode.strip(), loc_cfg.bins, loc_cfg.base_vocab)
        _print_json(dict(box=decode_location(tokens, loc_cfg).to_list(), ids=list(tokens.ids)))
        return
    if not args.box:
        raise UsageError('tokenize needs a box, or --decode with token text')
    tokens = encode_location(_parse_box(args.box), loc_cfg)
    print(render_location_text(tokens))
    logger.debug('Token ids %r', tokens.ids)


def cmd_embed(args):
    from . import tensorfile
    from .extractor import PointFeatureCloud
    from .localize import augment_features
    cfg = _load_config(args)
    cloud = PointFeatureCloud.load(args.points)
    pe_cfg = cfg.pos_embed_config(cloud.feature_dim)
    augmented = augment_features(cloud.features, cloud.positions, pe_cfg)
    tensorfile.write_tensor(args.out, augmented)
    tensorfile.write_sidecar(tensorfile.sidecar_path(args.out), dict(
        kind='augmented_features', N=len(cloud), D=int(augmented.shape[1]), combine=pe_cfg.combine))
    report = dict(N=len(cloud), D=int(augmented.shape[1]), out=args.out)
    if args.latents:
        report.update(_resample(cfg, augmented, args.params, args.latents))
    elif args.params:
        raise UsageError('--params needs --latents')
    _print_json(report)


def _resample(cfg, features, params_path, out):
    from . import tensorfile
    from .resampler import ResamplerParams, forward
    if params_path:
        params = ResamplerParams.load(params_path)
    else:
        r = cfg.resampler
        params = ResamplerParams.init(r.d_model, r.n_latents, r.n_layers, d_input=features.shape[1], seed=r.seed)
    latents = forward(params, features).values
    tensorfile.write_tensor(out, latents)
    tensorfile.write_sidecar(tensorfile.sidecar_path(out), dict(kind='resampled_latents', K=params.n_latents,
                                                                D=params.d_model, N=int(features.shape[0])))
    logger.info('Resampled %d points to %d x %d latents', features.shape[0], params.n_latents, params.d_model)
    return dict(latents=out, K=params.n_latents, D_model=params.d_model)


def _load_demos(paths):
    from .synthworld import Scene
    demos = []
    for path in paths:
        with open(path, 'r', encoding='utf-8') as f:
            d = json.load(f)
        demos.append((Scene.from_dict(d['scene']), d['response']))
    return demos


def cmd_datagen(args):
    from . import datagen
    cfg = _load_config(args)
    task = args.task or cfg.pipeline.task
    pipeline = args.pipeline or cfg.pipeline.pipeline
    client = datagen.client_from_environment(seed=args.seed)
    scene_paths = sorted(glob.glob(os.path.join(args.scenes_dir, '*.json'))) if args.scenes_dir else []
    scene_ids = [os.path.splitext(os.path.basename(p))[0] for p in scene_paths]

    if pipeline == 'box':
        scenes = [_load_scene(p) for p in scene_paths]
        if not scenes:
            raise ValueError('No scene files in %r' % args.scenes_dir)
        records, report = datagen.run_batch(scenes, task, client, demos=_load_demos(cfg.pipeline.demos),
                                            workers=cfg.pipeline.workers, scene_ids=scene_ids,
                                            template_dir=cfg.pipeline.template_dir)
        if task == datagen.records.TASK_GROUNDING:
            by_id = dict(zip(scene_ids, scenes))
            records = [datagen.attach_location_tokens(r, cfg.loc_token_config(by_id[r.scene_id].bounds))
                       for r in records]

    elif pipeline == 'chat':
        report = datagen.PipelineReport(scenes=len(scene_paths))
        records = []
        embed = _embedding(cfg, args.seed)
        answerer = datagen.LabelReadingVqaMock(embed.labels)
        for path, sid in zip(scene_paths, scene_ids):
            views = _render_views(_load_scene(path), cfg, embed)
            records.append(datagen.run_chat_captioner(views, client, answerer, cfg.pipeline.max_rounds, sid, report))

    elif pipeline == 'revise':
        if not args.input:
            raise UsageError('The revise pipeline needs --input')
        report = datagen.PipelineReport()
        sources = datagen.read_jsonl(args.input)
        report.scenes = len(set(r.scene_id for r in sources))
        records = [datagen.revise(r, task, client, report) for r in sources]

    else:
        raise UsageError('Unknown pipeline %r' % pipeline)

    datagen.write_jsonl(args.out, records)
    report_path = os.path.splitext(args.out)[0] + '.report.json'
    report.write(report_path)
    _print_json(dict(out=args.out, report=report_path, **report.to_dict()))


def cmd_split(args):
    from . import datagen
    records = datagen.read_jsonl(args.input)
    split = datagen.split_dataset(records, args.seed)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.input))
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name in ('train', 'val', 'test'):
        paths[name] = os.path.join(out_dir, '%s.jsonl' % name)
        datagen.write_jsonl(paths[name], list(getattr(split, name)))
    _print_json(dict(sizes=dict(zip(('train', 'val', 'test'), split.sizes)), files=paths))


def cmd_eval(args):
    from . import evalmetrics
    cfg = _load_config(args)
    items = evalmetrics.read_eval_items(args.predictions)
    if args.task == 'grounding':
        bounds = _parse_box(args.bounds) if args.bounds else None
        report = evalmetrics.evaluate_grounding(items, cfg.loc_token_config(bounds), args.iou_threshold)
        _print_json(report.to_dict())
    else:
        _print_json(evalmetrics.evaluate_batch(items, scale_cider=args.scale_cider).to_dict())


def cmd_nav(args):
    from . import navsim
    cfg = _load_config(args)
    if args.random_dims:
        env = navsim.random_maze(args.random_dims, seed=args.seed)
    else:
        env = navsim.NavEnv.load(args.env or navsim.BUNDLED_MAZE)
    policy_name = args.policy or cfg.nav.policy
    policies = dict(oracle=navsim.OracleWaypointPolicy, frontier=navsim.FrontierWaypointPolicy,
                    stop=navsim.ImmediateStopPolicy)
    if policy_name not in policies:
        raise UsageError('Unknown policy %r' % policy_name)
    result = navsim.run_episode(env, policies[policy_name](), args.max_steps or cfg.nav.max_steps,
                                cfg.nav.success_radius, cfg.nav.observe_radius)
    out = result.to_dict()
    if not args.transcript:
        del out['turns']
    _print_json(out)


def cmd_dump(args):
    from . import tensorfile
    print(tensorfile.dump_tensor(args.path, args.max_values))


def make_parser():
    parser = _Parser(prog='scene3d_llm_tool', description='3D scene language data and feature toolkit')
    parser.add_argument('--debug', action='store_true', help='enable debugging')
    parser.add_argument('--log-file', help='write the log here instead of a temporary file')
    parser.add_argument('--version', action='version', version='.'.join(map(str, __version__)))
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    def command(name, func, help_text, config=True, seed=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if config:
            p.add_argument('--config', help='YAML or JSON run config')
        if seed:
            p.add_argument('--seed', type=int, default=0, help='random seed (default 0)')
        return p

    p = command('scene', cmd_scene, 'generate a synthetic scene')
    p.add_argument('--n-objects', type=int)
    p.add_argument('--out', required=True)

    p = command('render', cmd_render, 'render orbit views of a scene')
    p.add_argument('--scene', required=True)
    p.add_argument('--views', type=int)
    p.add_argument('--out-dir', required=True)

    p = command('extract', cmd_extract, 'build 3D features from rendered views')
    p.add_argument('--method', required=True, help='|'.join(EXTRACT_METHODS))
    p.add_argument('--views-dir', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(seed=None)

    p = command('tokenize', cmd_tokenize, 'box to location tokens, or back with --decode', seed=False)
    p.add_argument('--box', help='JSON [xmin, ymin, zmin, xmax, ymax, zmax] or a file holding it')
    p.add_argument('--bounds', help='scene bounds, same format as --box')
    p.add_argument('--decode', help='location token text to decode')

    p = command('embed', cmd_embed, 'add 3D position embeddings to point features', seed=False)
    p.add_argument('--points', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--latents', help='also resample the embedded points to a fixed set of latents, written here')
    p.add_argument('--params', help='resampler checkpoint (default: seeded init from the resampler config)')

    p = command('datagen', cmd_datagen, 'generate 3D-language records')
    p.add_argument('--scenes-dir')
    p.add_argument('--task')
    p.add_argument('--pipeline', help='|'.join(PIPELINES))
    p.add_argument('--input', help='source JSONL for the revise pipeline')
    p.add_argument('--out', required=True)

    p = command('split', cmd_split, 'split a JSONL dataset 8:1:1', config=False)
    p.add_argument('--input', required=True)
    p.add_argument('--out-dir')

    p = command('eval', cmd_eval, 'score predictions', seed=False)
    p.add_argument('--predictions', required=True)
    p.add_argument('--task', default='text', help='text|grounding')
    p.add_argument('--bounds', help='scene bounds for grounding')
    p.add_argument('--iou-threshold', type=float, default=0.25)
    p.add_argument('--scale-cider', action='store_true', help='report CIDEr multiplied by 10')

    p = command('nav', cmd_nav, 'run one navigation episode')
    p.add_argument('--env', help='environment JSON (default: bundled maze)')
    p.add_argument('--random-dims', type=int, nargs=3, metavar=('X', 'Y', 'Z'))
    p.add_argument('--policy', help='|'.join(NAV_POLICIES))
    p.add_argument('--max-steps', type=int)
    p.add_argument('--transcript', action='store_true', help='include the conversation turns')

    p = command('dump', cmd_dump, 'print a tensor file as text', config=False, seed=False)
    p.add_argument('path')
    p.add_argument('--max-values', type=int, default=64)
    return parser


def exit_code_for(ex):
    from .datagen import ClientError
    if isinstance(ex, UsageError):
        return EXIT_USAGE
    if isinstance(ex, ClientError):
        return EXIT_CLIENT
    if isinstance(ex, OSError):
        return EXIT_IO
    return EXIT_VALIDATION


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
        if not getattr(args, 'command', None):
            raise UsageError('a command is required')
    except UsageError as ex:
        sys.stderr.write(json.dumps(dict(error='UsageError', message=str(ex), exit_code=EXIT_USAGE)) + '\n')
        return EXIT_USAGE

    handlers = configure_logging(args.debug, args.log_file)
    logger.info('Running %r', args.command)
    try:
        args.func(args)
    except (UsageError, ValueError, KeyError, RuntimeError, OSError) as ex:
        code = exit_code_for(ex)
        logger.debug('Command %r failed', args.command, exc_info=True)
        sys.stderr.write(json.dumps(dict(error=type(ex).__name__, message=str(ex), exit_code=code)) + '\n')
        return code
    finally:
        for handler in handlers:
            logging.root.removeHandler(handler)
            handler.close()
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
