# (c) 2016 Anaconda, Inc. / https://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.
"""
Synthetic still/video face sets, the still augmentations, blur synthesis
and the T-shaped reconstruction weight mask.
"""
from __future__ import absolute_import, division, print_function

import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from os.path import isfile, join

import numpy as np

from . import imaging
from .exceptions import AugmentationError, DataError
from .tensor import load_tensor, save_tensor
from .utils import derive_seed, dump_yaml, makedirs, yaml, yield_lines

logger = logging.getLogger(__name__)

MIN_EXTENT = 16
MIN_COVERAGE = 0.5
MANIFEST = 'manifest.txt'
INFO = 'dataset.yaml'

Geometry = namedtuple('Geometry', 'rows cols channels')
DEFAULT_GEOMETRY = Geometry(48, 40, 1)

DEFAULT_DEGRADATIONS = {
    'videos_per_identity': 4,
    'jitter_px': 2.0,
    'rotation_deg': 6.0,
    'illumination': [0.6, 1.1],
    'focus_radius': [0.0, 1.5],
    'motion_length': [1, 5],
    'noise_std': 0.02,
}

# op -> {param: (low, high)}; a missing parameter is drawn from its range
AUGMENT_RANGES = {
    'rotate': {'degrees': (-10.0, 10.0)},
    'shear': {'factor': (-0.1, 0.1)},
    'translate': {'dx': (-4.0, 4.0), 'dy': (-4.0, 4.0)},
    'mirror': {},
}

TMASK_FRACTIONS = {
    'eye_rows': (0.25, 0.45),
    'eye_cols': (0.10, 0.90),
    'nose_rows': (0.25, 0.85),
    'nose_cols': (0.40, 0.60),
}


def as_geometry(geometry):
    try:
        g = Geometry(*[int(v) for v in geometry])
    except (TypeError, ValueError):
        raise DataError("geometry must be (rows, cols, channels), got %r" % (geometry,))
    if g.rows < MIN_EXTENT or g.cols < MIN_EXTENT:
        raise DataError("degenerate geometry %dx%d: both extents must be >= %d"
                        % (g.rows, g.cols, MIN_EXTENT))
    if g.channels not in (1, 3):
        raise DataError("geometry channels must be 1 or 3, got %d" % g.channels)
    return g


class Identity(namedtuple('Identity', 'id still videos')):
    """One enrolled person: a single reference still ``[C, H, W]`` and its video ROIs."""
    __slots__ = ()


class Dataset(object):

    def __init__(self, identities, seed, geometry, degradations=None):
        self.identities = list(identities)
        self.seed = int(seed)
        self.geometry = Geometry(*geometry)
        self.degradations = dict(degradations or {})
        self._validate()

    def _validate(self):
        if len(self.identities) < 2:
            raise DataError("a dataset needs at least 2 identities, got %d"
                            % len(self.identities))
        shape = (self.geometry.channels, self.geometry.rows, self.geometry.cols)
        for k, ident in enumerate(self.identities):
            if ident.id != k:
                raise DataError("identity ids must be dense 0..K-1, found %r at %d"
                                % (ident.id, k))
            if not ident.videos:
                raise DataError("identity %d has no video ROIs" % k)
            for roi in [ident.still] + list(ident.videos):
                if tuple(np.shape(roi)) != shape:
                    raise DataError("identity %d has an ROI of shape %s, expected %s"
                                    % (k, np.shape(roi), shape))

    def __len__(self):
        return len(self.identities)

    @property
    def n_identities(self):
        return len(self.identities)

    @property
    def stills(self):
        return np.stack([i.still for i in self.identities])

    @property
    def still_labels(self):
        return np.arange(self.n_identities)

    @property
    def videos(self):
        return np.stack([v for i in self.identities for v in i.videos])

    @property
    def video_labels(self):
        return np.array([i.id for i in self.identities for _ in i.videos], dtype=np.int64)

    def pool(self):
        """All ROIs with their labels, stills first."""
        images = np.concatenate([self.stills, self.videos])
        labels = np.concatenate([self.still_labels, self.video_labels])
        return images, labels

    def manifest_rows(self, ext=None):
        ext = ext or ('.pgm' if self.geometry.channels == 1 else '.ppm')
        rows = []
        for ident in self.identities:
            rows.append((ident.id, 'still', 'still_%03d%s' % (ident.id, ext)))
            for j in range(len(ident.videos)):
                rows.append((ident.id, 'video', 'video_%03d_%02d%s' % (ident.id, j, ext)))
        return rows

    def same_as(self, other):
        return (self.geometry == other.geometry and
                np.array_equal(self.stills, other.stills) and
                np.array_equal(self.videos, other.videos) and
                np.array_equal(self.video_labels, other.video_labels))


def _span(value, rng):
    if isinstance(value, (list, tuple)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return float(value)


def degrade(still_params, geometry, degradations, rng):
    """Render one video ROI: pose jitter, illumination, blur and sensor noise."""
    g = geometry
    d = degradations
    jitter = float(d['jitter_px'])
    offset = (rng.uniform(-jitter, jitter), rng.uniform(-jitter, jitter))
    roi = imaging.render_face(still_params, g.rows, g.cols, g.channels, offset=offset)
    angle = rng.uniform(-1, 1) * float(d['rotation_deg'])
    roi = imaging.warp_affine(roi, imaging.rotation_matrix(angle, g.rows, g.cols))
    roi = roi * _span(d['illumination'], rng)
    if rng.uniform() < 0.5:
        roi = synthesize_blur(roi, 'out_of_focus', radius=_span(d['focus_radius'], rng))
    else:
        lo, hi = d['motion_length']
        roi = synthesize_blur(roi, 'motion', length=int(rng.integers(lo, hi + 1)),
                              angle=rng.uniform(0, 180))
    roi = roi + rng.normal(0.0, float(d['noise_std']), size=roi.shape)
    return np.clip(roi, 0.0, 1.0)


def _make_identity(k, seed, geometry, degradations):
    rng = np.random.default_rng(derive_seed(seed, k))
    params = imaging.face_params(rng)
    still = imaging.render_face(params, geometry.rows, geometry.cols, geometry.channels)
    videos = [degrade(params, geometry, degradations, rng)
              for _ in range(int(degradations['videos_per_identity']))]
    return Identity(k, still, videos)


def generate_synthetic_dataset(seed, n_identities, geometry=DEFAULT_GEOMETRY,
                               degradations=None, threads=1):
    """
    Generate ``n_identities`` face templates, each with one clean still
    and ``videos_per_identity`` degraded video ROIs.  Every identity draws
    from its own derived seed, so the result does not depend on
    ``threads``.
    """
    if n_identities < 2:
        raise DataError("n_identities must be >= 2, got %r" % n_identities)
    geometry = as_geometry(geometry)
    deg = dict(DEFAULT_DEGRADATIONS)
    deg.update(degradations or {})
    if int(deg['videos_per_identity']) < 1:
        raise DataError("videos_per_identity must be >= 1")

    def make(k):
        return _make_identity(k, seed, geometry, deg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            identities = list(pool.map(make, range(n_identities)))
    else:
        identities = [make(k) for k in range(n_identities)]
    logger.info("generated %d identities (%d videos each) at %dx%dx%d, seed %d",
                n_identities, deg['videos_per_identity'], geometry.rows, geometry.cols,
                geometry.channels, seed)
    return Dataset(identities, seed, geometry, deg)


def _op_spec(op):
    if isinstance(op, str):
        return op, {}
    op = dict(op)
    try:
        name = op.pop('op')
    except KeyError:
        raise AugmentationError("augmentation op needs an 'op' field: %r" % (op,))
    return name, op


def _augment_matrix(name, params, rows, cols):
    if name == 'rotate':
        return imaging.rotation_matrix(params['degrees'], rows, cols)
    if name == 'shear':
        return imaging.shear_matrix(params['factor'], rows)
    if name == 'translate':
        return imaging.translation_matrix(params['dx'], params['dy'])
    raise AugmentationError("unknown augmentation op %r" % name)


def augment_still(roi, ops, seed, ranges=None):
    """
    Return one transformed copy of ``roi`` per op.  Each op is a name or a
    mapping ``{'op': name, <param>: value}``; parameters left out are
    drawn uniformly from ``ranges`` using ``seed``.
    """
    ranges = ranges or AUGMENT_RANGES
    roi = np.asarray(roi, dtype=np.float64)
    rows, cols = roi.shape[-2:]
    rng = np.random.default_rng(seed)
    out = []
    for op in ops:
        name, params = _op_spec(op)
        if name not in ranges:
            raise AugmentationError("unknown augmentation op %r" % name)
        for key in sorted(ranges[name]):
            if key not in params:
                lo, hi = ranges[name][key]
                params[key] = float(rng.uniform(lo, hi))
        if name == 'mirror':
            out.append(np.ascontiguousarray(roi[..., ::-1]))
            continue
        m = _augment_matrix(name, params, rows, cols)
        if np.array_equal(m, imaging.translation_matrix(0, 0)):
            out.append(roi.copy())
            continue
        coverage = imaging.frame_coverage(m, rows, cols)
        if coverage < MIN_COVERAGE:
            raise AugmentationError("%s %r keeps only %.0f%% of the face in frame"
                                    % (name, params, 100 * coverage))
        out.append(imaging.warp_affine(roi, m))
    return out


def synthesize_blur(roi, kind, **params):
    if kind == 'out_of_focus':
        kernel = imaging.disk_kernel(float(params.get('radius', 0.0)))
    elif kind == 'motion':
        if 'angle' not in params:
            raise DataError("motion blur needs an angle")
        kernel = imaging.motion_kernel(params.get('length', 1), float(params['angle']))
    else:
        raise DataError("unknown blur kind %r" % kind)
    if kernel.shape == (1, 1):
        return np.array(roi, dtype=np.float64)
    return imaging.convolve(roi, kernel)


def blurred_copies(roi, seed, n=2, radius=1.5, length=5):
    """Out-of-focus and motion blurred copies of a still (same label)."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n):
        if j % 2 == 0:
            out.append(synthesize_blur(roi, 'out_of_focus', radius=rng.uniform(0.5, radius)))
        else:
            out.append(synthesize_blur(roi, 'motion', length=int(rng.integers(2, length + 1)),
                                       angle=rng.uniform(0, 180)))
    return out


class TMask(namedtuple('TMask', 'grid boxes alpha beta')):
    """
    ``grid`` holds the per-pixel weights, ``boxes`` the (r0, r1, c0, c1)
    half-open rectangles whose union is the T region.
    """
    __slots__ = ()

    @property
    def region(self):
        r = np.zeros(self.grid.shape, dtype=bool)
        for r0, r1, c0, c1 in self.boxes:
            r[r0:r1, c0:c1] = True
        return r

    @property
    def shape(self):
        return self.grid.shape


def _band(fractions, extent, name):
    lo, hi = fractions
    if not (0 < lo < 1 and 0 < hi < 1 and lo < hi):
        raise DataError("T-mask fractions %s must satisfy 0 < lo < hi < 1, got %r"
                        % (name, (lo, hi)))
    return int(np.floor(lo * extent + 0.5)), int(np.floor(hi * extent + 0.5))


def _symmetric_cols(fractions, cols, name):
    c0, c1 = _band(fractions, cols, name)
    # centred bands stay mirror symmetric after rounding
    if abs(fractions[0] + fractions[1] - 1.0) < 1e-12:
        c1 = cols - c0
    return c0, c1


def make_tmask(rows, cols, fractions=None, cfg=None):
    """
    Build the T-shaped weight grid: an eye band joined with a nose/mouth
    column.  Weights are ``cfg.tmask_alpha`` inside T and
    ``cfg.tmask_beta`` elsewhere.
    """
    from .losses import LossConfig
    cfg = cfg or LossConfig()
    f = dict(TMASK_FRACTIONS)
    f.update(fractions or {})
    unknown = set(f) - set(TMASK_FRACTIONS)
    if unknown:
        raise DataError("unknown T-mask fractions: %s" % ', '.join(sorted(unknown)))
    er0, er1 = _band(f['eye_rows'], rows, 'eye_rows')
    ec0, ec1 = _symmetric_cols(f['eye_cols'], cols, 'eye_cols')
    nr0, nr1 = _band(f['nose_rows'], rows, 'nose_rows')
    nc0, nc1 = _symmetric_cols(f['nose_cols'], cols, 'nose_cols')
    boxes = tuple(b for b in ((er0, er1, ec0, ec1), (nr0, nr1, nc0, nc1))
                  if b[1] > b[0] and b[3] > b[2])
    if not boxes:
        raise DataError("T-mask region is empty at %dx%d" % (rows, cols))
    grid = np.full((rows, cols), float(cfg.tmask_beta))
    for r0, r1, c0, c1 in boxes:
        grid[r0:r1, c0:c1] = float(cfg.tmask_alpha)
    return TMask(grid, boxes, float(cfg.tmask_alpha), float(cfg.tmask_beta))


def save_dataset(dataset, directory):
    """
    Write the graymap/pixmap images, the manifest, the lossless tensor
    containers and a YAML description of the generation parameters.
    """
    makedirs(directory)
    rows = dataset.manifest_rows()
    rois = [r for i in dataset.identities for r in [i.still] + list(i.videos)]
    with open(join(directory, MANIFEST), 'w') as fo:
        fo.write('# id role filename\n')
        for (k, role, fn), roi in zip(rows, rois):
            imaging.write_image(join(directory, fn), roi)
            fo.write('%d %s %s\n' % (k, role, fn))
    save_tensor(join(directory, 'stills.tensor'), dataset.stills)
    save_tensor(join(directory, 'videos.tensor'), dataset.videos)
    info = {
        'seed': dataset.seed,
        'n_identities': dataset.n_identities,
        'geometry': list(dataset.geometry),
        'degradations': dataset.degradations,
    }
    with open(join(directory, INFO), 'w') as fo:
        fo.write(dump_yaml(info))
    logger.info("wrote %d ROIs to %s", len(rows), directory)
    return join(directory, MANIFEST)


def read_manifest(directory):
    path = join(directory, MANIFEST)
    if not isfile(path):
        raise DataError("no dataset manifest at %s" % path)
    rows = []
    for line in yield_lines(path):
        parts = line.split()
        if len(parts) != 3 or parts[1] not in ('still', 'video'):
            raise DataError("bad manifest line in %s: %r" % (path, line))
        try:
            rows.append((int(parts[0]), parts[1], parts[2]))
        except ValueError:
            raise DataError("bad identity id in %s: %r" % (path, line))
    return rows


def load_dataset(directory):
    rows = read_manifest(directory)
    info = {}
    if isfile(join(directory, INFO)):
        with open(join(directory, INFO)) as fi:
            info = yaml.safe_load(fi) or {}
    stills_path = join(directory, 'stills.tensor')
    videos_path = join(directory, 'videos.tensor')
    if isfile(stills_path) and isfile(videos_path):
        stills = iter(load_tensor(stills_path).numpy())
        videos = iter(load_tensor(videos_path).numpy())

        def roi(role, fn):
            return next(stills if role == 'still' else videos)
    else:
        def roi(role, fn):
            return imaging.read_image(join(directory, fn))

    found = {}
    try:
        for k, role, fn in rows:
            entry = found.setdefault(k, [None, []])
            if role == 'still':
                if entry[0] is not None:
                    raise DataError("identity %d has more than one still" % k)
                entry[0] = roi(role, fn)
            else:
                entry[1].append(roi(role, fn))
    except StopIteration:
        raise DataError("tensor containers in %s hold fewer ROIs than the manifest" % directory)
    identities = []
    for k in sorted(found):
        still, videos = found[k]
        if still is None:
            raise DataError("identity %d has no still" % k)
        identities.append(Identity(k, still, videos))
    if not identities:
        raise DataError("empty dataset manifest in %s" % directory)
    shape = np.shape(identities[0].still)
    geometry = info.get('geometry') or (shape[1], shape[2], shape[0])
    return Dataset(identities, info.get('seed', 0), geometry, info.get('degradations'))
