# (c) 2016-2020 Anaconda, Inc. / http://anaconda.com
# All Rights Reserved
#
# stv is distributed under the terms of the BSD 3-clause license.
# Consult LICENSE.txt or http://opensource.org/licenses/BSD-3-Clause.

import textwrap
SEPARATOR = "-" * 70


def indent(s): return textwrap.fill(textwrap.dedent(s))


class StvError(Exception):
    """Base class of every error raised by the stv library."""

    def error_body(self):
        return str(self)

    def error_msg(self):
        return "\n".join([
            SEPARATOR,
            "Error: %s" % self.error_body(),
            SEPARATOR,
        ])


class ShapeError(StvError):
    def __init__(self, op, *shapes, **kwargs):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        self.detail = kwargs.get('detail', '')
        shapes_txt = ' vs '.join(str(list(s)) for s in self.shapes)
        msg = "%s: shape mismatch %s" % (op, shapes_txt)
        if self.detail:
            msg += " (%s)" % self.detail
        super(ShapeError, self).__init__(msg)


class DomainError(StvError):
    pass


class DegenerateInputError(StvError):
    pass


class GraphError(StvError):
    pass


class GradientCheckError(StvError):
    pass


class LayerConfigError(StvError):
    pass


class GeometryError(StvError):
    pass


class LossConfigError(StvError):
    pass


class LossInputError(StvError):
    pass


class SingularGradientError(StvError):
    pass


class SpecError(StvError):
    pass


class DataError(StvError):
    pass


class AugmentationError(DataError):
    pass


class SamplingError(StvError):
    pass


class EvaluationError(StvError):
    pass


class TrainingDivergedError(StvError):
    def __init__(self, iteration, loss_kind, value):
        self.iteration = iteration
        self.loss_kind = loss_kind
        self.value = value
        super(TrainingDivergedError, self).__init__(
            "non-finite %s loss (%r) at iteration %d" % (loss_kind, value, iteration))

    def error_body(self):
        return "\n".join([
            "Training diverged\n",
            indent("""\
                The %s loss evaluated to %r at iteration %d. Lower train.lr
                or check the dataset for constant ROIs, then train again.
            """ % (self.loss_kind, self.value, self.iteration)),
        ])


class CheckpointError(StvError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class SpecHashMismatch(CheckpointError):
    def __init__(self, expected, found):
        self.expected = expected
        self.found = found
        super(SpecHashMismatch, self).__init__(
            "checkpoint spec hash %s does not match network spec hash %s" % (found, expected))


class CheckpointVersionMismatch(CheckpointError):
    pass


class ConfigError(StvError):
    def __init__(self, key, message):
        self.key = key
        super(ConfigError, self).__init__("config key '%s': %s" % (key, message))


# adapted from conda-build

class YamlParsingError(StvError):
    pass


class UnableToParse(YamlParsingError):
    def __init__(self, original, *args, **kwargs):
        super(UnableToParse, self).__init__(*args, **kwargs)
        self.original = original

    def error_msg(self):
        return "\n".join([
            SEPARATOR,
            self.error_body(),
            self.indented_exception(),
        ])

    def error_body(self):
        return "\n".join([
            "Unable to parse config file\n",
        ])

    def indented_exception(self):
        orig = str(self.original)
        def indent(s): return s.replace("\n", "\n--> ")
        return "Error Message:\n--> {}\n\n".format(indent(orig))


class UnableToParseMissingJinja2(UnableToParse):
    def error_body(self):
        return "\n".join([
            super(UnableToParseMissingJinja2, self).error_body(),
            indent("""\
                It appears you are missing jinja2.  Please install that
                package, then run the command again.
            """),
        ])
