# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

import copy
import os
from os.path import dirname

from .exceptions import (ConfigError, DataError, LossConfigError, UnableToParse,
                         UnableToParseMissingJinja2)
from .utils import yaml

SECTIONS = ('data', 'model', 'train', 'loss', 'eval', 'paths')
ARCHS = ('ccm', 'tbe', 'haarnet', 'cfr')

# list of tuples (dotted key, type(s), default, description)
KEYS = [
    ('data.seed',                int, 7, '''
Seed of the synthetic dataset. Every identity is generated from its own
seed derived from this one, so the dataset does not depend on `--threads`.
'''),

    ('data.identities',          int, 8, '''
Number of synthetic identities (at least 2). Each identity has exactly one
high-quality still ROI.
'''),

    ('data.geometry',            list, [48, 40, 1], '''
ROI geometry as `[rows, cols, channels]`. Both extents must be at least 16;
channels is 1 (graymap) or 3 (pixmap).
'''),

    ('data.videos_per_identity', int, 4, '''
Number of degraded video ROIs rendered per identity.
'''),

    ('data.degradations',        dict, {}, '''
Overrides of the video degradation model: `jitter_px`, `rotation_deg`,
`illumination` (`[low, high]` gain), `focus_radius` (`[low, high]`),
`motion_length` (`[low, high]`) and `noise_std`.
'''),

    ('model.arch',               str, 'ccm', '''
Architecture to train or evaluate: `ccm`, `tbe`, `haarnet` or `cfr`.
'''),

    ('model.scale',              str, 'desk', '''
`desk` builds the reduced networks that train on a CPU; `full` builds the
published geometry (complexity accounting only).
'''),

    ('model.overrides',          dict, {}, '''
Per-architecture builder overrides, e.g. `{hidden: 64}` for the CCM head
width or `{n_branches: 2}` for TBE.
'''),

    ('model.seed',               int, 0, '''
Seed of the parameter initialization.
'''),

    ('train.lr',                 (int, float), 0.01, '''
SGD learning rate (> 0).
'''),

    ('train.momentum',           (int, float), 0.9, '''
SGD momentum in [0, 1).
'''),

    ('train.weight_decay',       (int, float), 1e-4, '''
L2 weight decay added to every gradient (>= 0).
'''),

    ('train.batch_size',         int, 16, '''
Mini-batch size L (triplets per batch for triplet losses).
'''),

    ('train.epochs',             int, 10, '''
Epochs of every stage of the schedule. `--epochs` sets this key.
'''),

    ('train.stage_epochs',       dict, {}, '''
Per-stage epoch counts overriding `train.epochs`, keyed by stage name
(`trunk`, `branch1`, `finetune`, `triplet`, `pretrain`, `autoencoder`, ...).
'''),

    ('train.seed',               int, 0, '''
Seed of batch order, sampling, dropout and augmentation.
'''),

    ('train.sampling',           str, 'uniform', '''
CCM pre-training triplet sampling: `uniform` or `hard`.
'''),

    ('train.mining_policy',      str, 'hardest', '''
Online triplet mining policy of the embedding triplet stages: `hardest` or
`semi_hard`. Triplets are re-mined once per epoch.
'''),

    ('train.mining_margin',      (int, float), 0.2, '''
Margin of the semi-hard policy.
'''),

    ('train.blur_copies',        int, 2, '''
Blurred copies of every still added to the TBE training set.
'''),

    ('train.augment_ops',        list, ['mirror', 'rotate', 'shear', 'translate'], '''
Still augmentations used by CCM fine-tuning, each a name or a mapping
`{op: rotate, degrees: 5}`.
'''),

    ('loss.alpha_triplet',       (int, float), 0.2, '''
Triplet margin.
'''),

    ('loss.beta_mean',           (int, float), 0.5, '''
Mean-distance margin on squared distances between class means.
'''),

    ('loss.gamma_std',           (int, float), 0.2, '''
Standard-deviation margin; must be smaller than `loss.beta_mean` when both
regularizers are active.
'''),

    ('loss.delta1',              (int, float), 1.0, '''
Weight of the triplet term of the composite loss (> 0).
'''),

    ('loss.delta2',              (int, float), 0.5, '''
Weight of the mean-distance term.
'''),

    ('loss.delta3',              (int, float), 0.25, '''
Weight of the standard-deviation term.
'''),

    ('loss.tmask_alpha',         (int, float), 1.0, '''
Reconstruction weight inside the T-shaped eye/nose/mouth region.
'''),

    ('loss.tmask_beta',          (int, float), 0.25, '''
Reconstruction weight outside the T region.
'''),

    ('loss.tmask_fractions',     dict, {}, '''
T region geometry as fractions of the ROI: `eye_rows`, `eye_cols`,
`nose_rows`, `nose_cols`, each `[low, high]`.
'''),

    ('eval.matcher',             str, 'auto', '''
`cosine`, `ccm`, or `auto` (ccm for CCM networks, cosine otherwise).
'''),

    ('eval.trials',              int, 5, '''
Number of 80% probe resampling trials.
'''),

    ('eval.seed',                int, 0, '''
Seed of the probe resampling.
'''),

    ('eval.fusion',              str, 'mean', '''
Trajectory score fusion: `mean` or `max`.
'''),

    ('eval.threads',             int, 1, '''
Worker threads for probe scoring and dataset generation. Results do not
depend on this value.
'''),

    ('paths.workdir',            str, 'stv-work', '''
Working directory holding `data/`, `checkpoints/` and `reports/`.
Overridden by the `STV_WORKDIR` environment variable unless `--workdir`
is given.
'''),

    ('paths.checkpoint',         str, '', '''
Checkpoint evaluated by `stv eval`; defaults to the latest checkpoint of
`model.arch` in the workdir.
'''),
]

DEFAULTS = dict((key, default) for key, _, default, _ in KEYS)
TYPES = dict((key, types) for key, types, _, _ in KEYS)


class RunConfig(dict):
    """
    A resolved run configuration: every dotted key of ``KEYS`` mapped to its
    value.  Sections are views by prefix.
    """

    def section(self, name):
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
        prefix = name + '.'
        return dict((key[len(prefix):], value) for key, value in self.items()
                    if key.startswith(prefix))

    @property
    def train(self):
        return train_config(self)

    @property
    def loss(self):
        return loss_config(self)


def flatten(tree, prefix=''):
    """Nested section mappings to dotted keys; dict-typed keys stay whole."""
    flat = {}
    for key, value in (tree or {}).items():
        name = prefix + str(key)
        if isinstance(value, dict) and name not in TYPES:
            flat.update(flatten(value, name + '.'))
        else:
            flat[name] = value
    return flat


def yamlize(data, directory):
    try:
        return yaml.safe_load(data)
    except yaml.YAMLError as e:
        if ('{{' not in data) and ('{%' not in data):
            raise UnableToParse(original=e)
        try:
            from .jinja import render_jinja
        except ImportError as ex:
            raise UnableToParseMissingJinja2(original=ex)
        data = render_jinja(data, directory)
        try:
            return yaml.safe_load(data)
        except yaml.YAMLError as e:
            raise UnableToParse(original=e)


def parse(path):
    """Read a run configuration file into a flat ``{dotted key: value}`` mapping."""
    with open(path) as fi:
        data = fi.read()
    res = yamlize(data, dirname(path))
    if res is None:
        return {}
    if not isinstance(res, dict):
        raise ConfigError('<file>', "%s must contain a mapping of sections" % path)
    return dict((k, coerce(k, v)) for k, v in flatten(res).items() if v is not None)


def coerce(key, value):
    # YAML 1.1 reads exponent floats without a dot (1e-4) as strings
    types = TYPES.get(key)
    if isinstance(value, str) and isinstance(types, tuple) and float in types:
        try:
            return float(value)
        except ValueError:
            pass
    return value


def parse_value(text):
    """A command-line override value, read with the YAML scalar rules."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _check_choice(info, key, choices):
    if info[key] not in choices:
        raise ConfigError(key, "must be one of %s, got %r" % (', '.join(choices), info[key]))


def _check_min(info, key, low):
    if info[key] < low:
        raise ConfigError(key, "must be >= %s, got %r" % (low, info[key]))


def verify(info):
    for key, elt in info.items():
        if key not in TYPES:
            raise ConfigError(key, "unknown key")
        types = TYPES[key]
        if isinstance(elt, bool) or not isinstance(elt, types):
            raise ConfigError(key, "points to %s, expected %s" % (type(elt).__name__, types))

    full = resolve(info)
    _check_min(full, 'data.identities', 2)
    _check_min(full, 'data.videos_per_identity', 1)
    _check_min(full, 'eval.trials', 1)
    _check_min(full, 'eval.threads', 1)
    _check_choice(full, 'model.arch', ARCHS)
    _check_choice(full, 'model.scale', ('desk', 'full'))
    _check_choice(full, 'eval.matcher', ('auto', 'cosine', 'ccm'))
    _check_choice(full, 'eval.fusion', ('mean', 'max'))
    _check_choice(full, 'train.sampling', ('uniform', 'hard'))
    _check_choice(full, 'train.mining_policy', ('hardest', 'semi_hard'))
    from .data import as_geometry
    if len(full['data.geometry']) != 3:
        raise ConfigError('data.geometry', "expected [rows, cols, channels]")
    try:
        as_geometry(full['data.geometry'])
    except DataError as e:
        raise ConfigError('data.geometry', str(e))
    from .data import DEFAULT_DEGRADATIONS
    for name in full['data.degradations']:
        if name not in DEFAULT_DEGRADATIONS:
            raise ConfigError('data.degradations.%s' % name, "unknown degradation (use %s)"
                              % ', '.join(sorted(DEFAULT_DEGRADATIONS)))
    from .networks import override_keys
    allowed = override_keys(full['model.arch'], full['model.scale'])
    for name in full['model.overrides']:
        if name not in allowed:
            raise ConfigError('model.overrides.%s' % name, "unknown %s override (use %s)"
                              % (full['model.arch'], ', '.join(sorted(allowed))))
    try:
        loss_config(full).validate()
    except LossConfigError as e:
        raise ConfigError('loss', str(e))
    train_config(full)
    return full


def resolve(info):
    full = RunConfig(copy.deepcopy(DEFAULTS))
    full.update(info)
    return full


def apply_overrides(info, overrides):
    """``overrides`` is a list of (dotted key, text value) pairs from the command line."""
    info = dict(info)
    for key, text in overrides:
        if key not in TYPES:
            raise ConfigError(key, "unknown key")
        value = parse_value(text) if isinstance(text, str) else text
        if TYPES[key] is str and not isinstance(value, str):
            value = str(text)
        info[key] = coerce(key, value)
    return info


def env_workdir(info, cli_workdir=None):
    if cli_workdir:
        info['paths.workdir'] = cli_workdir
    elif os.environ.get('STV_WORKDIR'):
        info['paths.workdir'] = os.environ['STV_WORKDIR']
    return info


def load(path=None, overrides=(), cli_workdir=None):
    """Parse (optional) file, apply overrides and the environment, verify, resolve."""
    try:
        info = parse(path) if path else {}
    except (IOError, OSError) as e:
        raise ConfigError('<file>', "could not open '%s' for reading: %s" % (path, e))
    info = apply_overrides(info, overrides)
    info = env_workdir(info, cli_workdir)
    return verify(info)


def echo_items(info):
    return [(key, _render(info[key])) for key in sorted(info)]


def echo_lines(info):
    return ['%s: %s' % item for item in echo_items(info)]


def _render(value):
    if isinstance(value, (list, dict)):
        return yaml.safe_dump(value, default_flow_style=True).strip()
    return str(value)


def loss_config(info):
    from .losses import LossConfig
    return LossConfig(**dict((f, float(info['loss.' + f])) for f in LossConfig._fields))


def train_config(info):
    from .trainer import TrainConfig
    return TrainConfig(lr=info['train.lr'], momentum=info['train.momentum'],
                       weight_decay=info['train.weight_decay'],
                       batch_size=info['train.batch_size'], epochs=info['train.epochs'],
                       stage_epochs=info['train.stage_epochs'], seed=info['train.seed'],
                       loss=loss_config(info), mining_policy=info['train.mining_policy'],
                       mining_margin=info['train.mining_margin'],
                       sampling=info['train.sampling'], blur_copies=info['train.blur_copies'],
                       augment_ops=info['train.augment_ops'],
                       tmask_fractions=info['loss.tmask_fractions'] or None)


def degradations(info):
    d = dict(info['data.degradations'])
    d['videos_per_identity'] = info['data.videos_per_identity']
    return d


def matcher_kind(info, arch):
    kind = info['eval.matcher']
    if kind == 'auto':
        return 'ccm' if arch == 'ccm' else 'cosine'
    return kind


def generate_doc():
    """Markdown reference of every configuration key."""
    lines = []
    for section in SECTIONS:
        lines.append('## `%s`\n' % section)
        for key, types, default, descr in KEYS:
            if key.split('.')[0] != section:
                continue
            names = (types,) if isinstance(types, type) else types
            lines.append('### `%s`\n' % key)
            lines.append('_type:_ %s, _default:_ `%s`\n'
                         % (' or '.join(t.__name__ for t in names), _render(default)))
            lines.append(descr.strip() + '\n')
    return '\n'.join(lines)
